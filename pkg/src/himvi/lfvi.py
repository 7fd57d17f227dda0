"""Likelihood-free variational inference.

Each iteration alternates

1. ratio steps: the ratio network learns to separate rows simulated from the
   model at beta ~ q(beta) (label 1) from observed rows paired with local
   draws z ~ q(z | x, beta) (label 0);
2. one variational step: ADAM ascent on the surrogate ELBO
   log p(beta) - log q(beta) + (N/M) sum_m r(x_m, z_m, beta)
   with the ratio network held fixed and every sample reparameterized.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .ndcore import AdamState, ContractError, RngStream, Tape, adam_step, clip_by_global_norm, grad, ops, value_of
from .ratio import RatioEstimator, make_ratio_estimator, ratio_inputs, ratio_train_step
from .variational import (
    GlobalApprox,
    LocalApprox,
    entropy_term,
    global_sample,
    local_sample,
    make_global_approx,
    make_local_approx,
    posterior_draws,
)

log = logging.getLogger(__name__)


@dataclass
class LfviConfig:
    n_iterations: int = 2000
    batch_size: int = 64                 # M, rows of data per variational step
    ratio_batch_size: int | None = 256   # rows per class in a ratio step; None means M
    mc_samples: int = 1
    ratio_steps_per_q_step: int = 1
    ratio_warmup: int = 0                # ratio steps before the first variational step
    loss: str = "log"
    ratio_lr: float = 1e-3
    global_lr: float = 1e-2
    local_lr: float = 1e-3
    clip_norm: float | None = 10.0
    clip_iterations: int = 200           # gradient clipping applies to this many early iterations
    ratio_hidden: tuple = (64, 64)
    local_hidden: tuple = (64,)
    global_family: str = "auto"          # auto | meanfield_normal | meanfield_lognormal | point_mass
    init_log_scale: float = -1.0
    init: str = "scaled"
    local_uses_beta: bool = True
    point_mass_jitter: float = 0.0       # std of beta perturbation in ratio batches when q is a point mass
    data_jitter: float = 0.0             # smoothing of observed data features, relative to the simulated spread
    average_from: float = 0.5            # report lambda averaged over iterations from this fraction on
    max_skipped_run: int = 100           # consecutive skipped variational steps that count as divergence
    update_ratio: bool = True
    update_q: bool = True
    check_invariants: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_iterations", "batch_size", "mc_samples", "ratio_steps_per_q_step", "max_skipped_run"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ratio_batch_size is not None and self.ratio_batch_size < 1:
            raise ValueError("ratio_batch_size must be positive")
        if not 0.0 <= self.average_from <= 1.0:
            raise ValueError("average_from must lie in [0, 1]")
        if self.loss not in ("log", "hinge"):
            raise ValueError(f"loss must be 'log' or 'hinge', got {self.loss!r}")
        self.ratio_hidden = tuple(self.ratio_hidden)
        self.local_hidden = tuple(self.local_hidden)

    @property
    def ratio_rows(self) -> int:
        return self.batch_size if self.ratio_batch_size is None else self.ratio_batch_size

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        d = asdict(self)
        d["ratio_hidden"], d["local_hidden"] = list(self.ratio_hidden), list(self.local_hidden)
        return d


@dataclass
class FitResult:
    """``q_global`` is the tail-averaged approximation once the fit ends; ``q_global_last`` the final iterate."""

    q_global: GlobalApprox
    q_local: LocalApprox | None
    ratio: RatioEstimator
    q_global_last: GlobalApprox | None = None
    ratio_loss: list = field(default_factory=list)
    surrogate_elbo: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    diverged: bool = False
    skipped: int = 0

    @property
    def n_iterations(self):
        return len(self.surrogate_elbo)


def minibatch_estimate(values, N: int, M: int | None = None):
    """(N/M) * sum(values), the unbiased estimate of a sum over all N data points."""
    M = len(value_of(values)) if M is None else M
    if M == 0 or len(value_of(values)) == 0:
        raise ContractError("empty minibatch")
    if len(value_of(values)) != M:
        raise ContractError(f"batch has {len(value_of(values))} values, expected M={M}")
    return ops.mul(ops.sum(values), N / M)


# ---------------------------------------------------------------- building blocks


def prior_fn(model):
    return None if model.flat_prior else model.prior_logpdf


def local_draws(model, q_local, x, beta, rng, params=None):
    if model.local_dim == 0 or q_local is None:
        return np.zeros((len(x), 0))
    return local_sample(q_local, x, beta if q_local.beta_dim else None, rng, params=params)


def ratio_values(model, est, q_local, x, beta, rng, local_params=None):
    """r(x_n, z_n, beta) for each row of ``x`` with z_n ~ q(z | x_n, beta); tape-aware in beta and phi."""
    z = local_draws(model, q_local, x, beta, rng, local_params)
    return est.logits(ratio_inputs(model.data_features(x), z, model.global_features(beta, x, z)))


def surrogate_elbo(model, q_global, q_local, r, data_batch, N, rng, global_params=None, local_params=None, mc_samples=1):
    """Entropy term plus (N/M) times the summed ratio over the batch, averaged over ``mc_samples`` draws."""
    data_batch = np.asarray(data_batch, dtype=np.float64)
    total = None
    for _ in range(mc_samples):
        beta, log_q = global_sample(q_global, rng, params=global_params)
        ent = entropy_term(q_global, beta, log_q, prior_fn(model))
        rv = ratio_values(model, r, q_local, data_batch, beta, rng, local_params)
        term = ops.add(ent, minibatch_estimate(rv, N))
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / mc_samples)


def ratio_batches(model, q_global, q_local, data, n_rows, rng, jitter=0.0, data_jitter=0.0):
    """Model-simulated (p) and observed-plus-local (q) inputs, one beta ~ q per row pair.

    ``data_jitter`` adds Gaussian noise to the observed data features, scaled
    per column by the spread of the simulated ones. The smoothing does not
    depend on beta, so the beta-gradient of the optimal ratio is unchanged.
    """
    betas, _ = posterior_draws(q_global, rng, n_rows)
    if q_global.is_point_mass and jitter > 0:
        betas = betas + jitter * rng.normal(size=betas.shape)
    idx = rng.integers(len(data), size=n_rows)
    x_obs = data[idx]
    x_sim, z_sim = model.simulate(betas, model.covariates_of(x_obs), rng)
    z_obs = local_draws(model, q_local, x_obs, betas, rng)
    f_sim, f_obs = model.data_features(x_sim), model.data_features(x_obs)
    if data_jitter > 0:
        f_obs = f_obs + data_jitter * f_sim.std(axis=0) * rng.normal(size=f_obs.shape)
    p_in = ratio_inputs(f_sim, z_sim, model.global_features(betas, x_sim, z_sim))
    q_in = ratio_inputs(f_obs, z_obs, model.global_features(betas, x_obs, z_obs))
    return np.asarray(p_in), np.asarray(q_in)


def default_family(model, cfg):
    if cfg.global_family != "auto":
        return cfg.global_family
    return "meanfield_lognormal" if model.positive else "meanfield_normal"


def init_state(model, data, cfg: LfviConfig, rng: RngStream):
    """Randomly initialized (q_global, q_local, ratio estimator)."""
    kind = default_family(model, cfg)
    start = model.init_global(rng.child(0), cfg.init)
    if kind == "point_mass":
        q_global = make_global_approx(kind, model.global_dim, value=start)
    else:
        loc = np.log(start) if kind == "meanfield_lognormal" else start
        q_global = make_global_approx(kind, model.global_dim, loc=loc, log_scale=cfg.init_log_scale)
    q_local = None
    if model.local_dim:
        beta_dim = model.global_dim if cfg.local_uses_beta else 0
        q_local = make_local_approx(rng.child(1), model.data_dim, beta_dim, model.local_dim, hidden=cfg.local_hidden, init=cfg.init)
    est = make_ratio_estimator(rng.child(2), model.data_feature_dim, model.local_dim, model.global_feature_dim, hidden=cfg.ratio_hidden, init=cfg.init)
    return q_global, q_local, est


def _finite(params):
    return all(np.all(np.isfinite(v)) for v in params.values())


# ---------------------------------------------------------------- the loop


def lfvi_fit(
    model,
    data,
    cfg: LfviConfig,
    q_global: GlobalApprox | None = None,
    q_local: LocalApprox | None = None,
    r: RatioEstimator | None = None,
    callback: Callable | None = None,
    run_log=None,
) -> FitResult:
    """Alternate ratio and variational steps for ``cfg.n_iterations`` iterations.

    ``callback(iteration, result)`` runs after every iteration. ``run_log``
    is a path for the per-iteration JSON-lines log. Fully deterministic given
    ``cfg.seed``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.data_dim:
        raise ContractError(f"data must have shape (N, {model.data_dim})")
    N = len(data)
    M = cfg.batch_size
    if M > N:
        raise ValueError(f"batch_size {M} exceeds the number of data points {N}")
    root = RngStream(cfg.seed)
    g0, l0, r0 = init_state(model, data, cfg, root.child(0))
    q_global = g0 if q_global is None else q_global
    q_local = l0 if q_local is None else q_local
    est = r0 if r is None else r

    ratio_opt = AdamState(learning_rate=cfg.ratio_lr)
    global_opt = AdamState(learning_rate=cfg.global_lr)
    local_opt = AdamState(learning_rate=cfg.local_lr)
    result = FitResult(q_global, q_local, est)
    log_fh = open(run_log, "w") if run_log is not None else None
    avg_start = min(int(cfg.average_from * cfg.n_iterations), cfg.n_iterations - 1)
    avg_sum, avg_count = None, 0
    skip_run = 0

    def ratio_step(stream, it):
        nonlocal est, ratio_opt
        p_in, q_in = ratio_batches(model, q_global, q_local, data, cfg.ratio_rows, stream, cfg.point_mass_jitter, cfg.data_jitter)
        clip = cfg.clip_norm if it < cfg.clip_iterations else None
        est, ratio_opt, value, accepted = ratio_train_step(est, p_in, q_in, cfg.loss, ratio_opt, clip)
        if not accepted:
            result.skipped += 1
        return value

    try:
        warm = root.child(1)
        for k in range(cfg.ratio_warmup):
            ratio_step(warm.child(k), 0)

        for it in range(cfg.n_iterations):
            t0 = time.perf_counter()
            stream = root.child(2, it)
            hashes = (q_global.hash(), q_local.hash() if q_local else None) if cfg.check_invariants else None

            losses = []
            if cfg.update_ratio:
                for k in range(cfg.ratio_steps_per_q_step):
                    losses.append(ratio_step(stream.child(0, k), it))
            ratio_loss = float(np.mean(losses)) if losses else float("nan")
            if hashes is not None and hashes != (q_global.hash(), q_local.hash() if q_local else None):
                raise RuntimeError("variational parameters changed during a ratio step")

            r_hash = est.hash() if cfg.check_invariants else None
            elbo = _variational_step(model, data, N, M, cfg, it, stream.child(1), q_global, q_local, est, global_opt, local_opt)
            value, q_global, q_local, global_opt, local_opt, ok = elbo
            if not ok:
                result.skipped += 1
            skip_run = 0 if ok else skip_run + 1
            if r_hash is not None and r_hash != est.hash():
                raise RuntimeError("ratio parameters changed during a variational step")

            wall = 1000.0 * (time.perf_counter() - t0)
            result.ratio_loss.append(ratio_loss)
            result.surrogate_elbo.append(value)
            result.wall_ms.append(wall)
            result.q_global, result.q_local, result.ratio = q_global, q_local, est
            if it >= avg_start:
                avg_sum = {k: v.copy() for k, v in q_global.params.items()} if avg_sum is None else {
                    k: avg_sum[k] + v for k, v in q_global.params.items()
                }
                avg_count += 1
            if log_fh is not None:
                rec = {"iteration": it, "ratio_loss": _json_num(ratio_loss), "surrogate_elbo": _json_num(value), "wall_ms": wall}
                log_fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(it, result)

            if not (_finite(q_global.params) and (q_local is None or _finite(q_local.params)) and _finite(est.params)):
                log.error("non-finite parameters at iteration %d; aborting", it)
                result.diverged = True
                break
            if skip_run >= cfg.max_skipped_run:
                log.error("%d consecutive non-finite variational steps at iteration %d; aborting", skip_run, it)
                result.diverged = True
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    result.q_global_last = q_global
    if avg_count and not result.diverged:
        result.q_global = q_global.with_params({k: v / avg_count for k, v in avg_sum.items()})
    return result


def _json_num(v):
    return v if np.isfinite(v) else None


def surrogate_gradients(model, q_global, q_local, est, batch, N, rng, mc_samples=1):
    """``(value, grads)`` of the surrogate ELBO; grads are keyed ``("global", name)`` and ``("local", name)``."""
    tape = Tape()
    gp = tape.vars(q_global.params)
    lp = tape.vars(q_local.params) if q_local is not None else None
    with np.errstate(over="ignore", invalid="ignore"):
        elbo = surrogate_elbo(model, q_global, q_local, est, batch, N, rng, gp, lp, mc_samples)
    value = float(elbo.value)
    if not np.isfinite(value):
        return value, None
    wrt = {("global", k): v for k, v in gp.items()}
    if lp is not None:
        wrt.update({("local", k): v for k, v in lp.items()})
    return value, grad(tape, elbo, wrt)


def _variational_step(model, data, N, M, cfg, it, rng, q_global, q_local, est, global_opt, local_opt):
    """One ADAM ascent step on lambda and phi; theta stays fixed."""
    idx = rng.choice(N, size=M, replace=False) if M < N else np.arange(N)
    value, g = surrogate_gradients(model, q_global, q_local, est, data[idx], N, rng, cfg.mc_samples)
    if not cfg.update_q:
        return value, q_global, q_local, global_opt, local_opt, True
    if g is None:
        log.warning("iteration %d: non-finite surrogate ELBO, step skipped", it)
        return value, q_global, q_local, global_opt, local_opt, False
    g = {k: -v for k, v in g.items()}  # ADAM descends; the ELBO is maximized
    if cfg.clip_norm is not None and it < cfg.clip_iterations:
        g = clip_by_global_norm(g, cfg.clip_norm)
    global_opt, new_global, ok = adam_step(global_opt, {k: g[("global", k)] for k in q_global.params}, q_global.params)
    q_global = q_global.with_params(new_global)
    if q_local is not None:
        local_opt, new_local, ok_local = adam_step(local_opt, {k: g[("local", k)] for k in q_local.params}, q_local.params)
        q_local = q_local.with_params(new_local)
        ok = ok and ok_local
    return value, q_global, q_local, global_opt, local_opt, ok
