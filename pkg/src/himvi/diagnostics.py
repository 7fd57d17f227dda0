"""Verification instruments: ratio stability traces, noise inversion and posterior metrics."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import gaussian_kde

from .lfvi import LfviConfig, init_state, lfvi_fit, ratio_values
from .ndcore import RngStream, Tape, grad, ops, value_of
from .variational import GlobalApprox, global_sample, make_global_approx

log = logging.getLogger(__name__)

REGIMES = ("joint", "random", "posterior")
MIN_KDE_SAMPLES = 100
MAX_HALVINGS = 60


# ------------------------------------------------------------ ratio stability


@dataclass
class StabilityTrace:
    """Samples of sum_n log p(x_n | beta) - r(x_n, beta) over beta ~ q at each checkpoint."""

    regime: str
    iterations: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    q_global_start: GlobalApprox | None = None
    q_global_end: GlobalApprox | None = None

    @property
    def variances(self) -> list:
        return [float(np.var(s)) for s in self.samples]

    @property
    def mean_diffs(self) -> list:
        return [float(np.mean(s)) for s in self.samples]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "variance", "mean_diff"])
            for it, v, m in zip(self.iterations, self.variances, self.mean_diffs):
                w.writerow([it, repr(v), repr(m)])


def ratio_difference(model, est, q_global: GlobalApprox, data, rng, n_draws=32) -> np.ndarray:
    """sum_n [log p(x_n | beta) - r(x_n, beta)] for ``n_draws`` draws beta ~ q.

    At the optimal ratio this equals sum_n log q(x_n) for every beta.
    """
    out = np.empty(n_draws)
    for k in range(n_draws):
        beta, _ = global_sample(q_global, rng)
        beta = np.asarray(beta)
        r = value_of(ratio_values(model, est, None, data, beta, rng))
        out[k] = float(np.sum(value_of(model.loglik(data, beta))) - np.sum(r))
    return out


def exact_posterior_approx(model, data) -> GlobalApprox:
    """The model's exact posterior as a mean-field normal; the covariance must be diagonal."""
    mean, cov = model.posterior(data)
    if np.any(np.abs(cov - np.diag(np.diag(cov))) > 1e-12):
        raise ValueError("exact posterior is not mean-field; cannot freeze q there")
    return make_global_approx("meanfield_normal", len(mean), loc=mean, log_scale=0.5 * np.log(np.diag(cov)))


def ratio_stability(model, data, regime: str, cfg: LfviConfig, checkpoint_every=100, n_draws=32) -> StabilityTrace:
    """Trace the ratio error while fitting.

    ``joint`` trains q and r together; ``random`` trains r with q frozen at
    its initialization; ``posterior`` trains r with q frozen at the exact
    posterior. Checkpoints are taken before training and after every
    ``checkpoint_every`` iterations, each on its own stream of beta draws.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    data = np.asarray(data, dtype=np.float64)
    cfg = replace(cfg, update_q=regime == "joint")
    q0, _, r0 = init_state(model, data, cfg, RngStream(cfg.seed).child(0))
    if regime == "posterior":
        q0 = exact_posterior_approx(model, data)
    draws = RngStream(cfg.seed).child(3)
    trace = StabilityTrace(regime, q_global_start=q0)

    def record(iteration, q, est):
        trace.iterations.append(iteration)
        trace.samples.append(ratio_difference(model, est, q, data, draws.child(iteration), n_draws))

    def on_iteration(it, result):
        if (it + 1) % checkpoint_every == 0:
            record(it + 1, result.q_global, result.ratio)

    record(0, q0, r0)
    res = lfvi_fit(model, data, cfg, q_global=q0, r=r0, callback=on_iteration)
    trace.q_global_end = res.q_global_last
    return trace


# ------------------------------------------------------------ noise inversion


@dataclass
class InversionResult:
    eps: np.ndarray
    converged: bool
    residual: float
    iterations: int
    residuals: list


def noise_invert(
    g: Callable,
    x_target,
    eps0,
    step_size: float = 1.0,
    backtrack: bool = True,
    max_iters: int = 1000,
    tol: float = 1e-8,
) -> InversionResult:
    """Gauss-Newton-free least squares: eps <- eps - rho J(eps)^T (g(eps) - x).

    ``g`` maps a noise vector (possibly a tape Var) to an output of the same
    shape as ``x_target``. With ``backtrack`` each step halves ``rho`` from
    ``step_size`` until the residual decreases; if no halving helps the
    iteration has stalled and stops. Converged iff the residual norm is at
    most ``tol``.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    eps = np.asarray(eps0, dtype=np.float64).copy()

    def residual(e):
        return float(np.linalg.norm(np.asarray(value_of(g(e))) - x_target))

    res = residual(eps)
    history = [res]
    it = 0
    while it < max_iters and res > tol:
        tape = Tape()
        var = tape.var(eps)
        diff = ops.sub(g(var), x_target)
        (direction,) = grad(tape, ops.mul(ops.sum(ops.square(diff)), 0.5), [var])
        it += 1
        rho = step_size
        candidate = eps - rho * direction
        new_res = residual(candidate)
        if backtrack:
            halvings = 0
            while not new_res < res and halvings < MAX_HALVINGS:
                rho *= 0.5
                candidate = eps - rho * direction
                new_res = residual(candidate)
                halvings += 1
            if not new_res < res:
                log.info("noise inversion stalled at residual %.3g", res)
                break
        eps, res = candidate, new_res
        history.append(res)
    return InversionResult(eps, res <= tol, res, it, history)


# ------------------------------------------------------------ posterior metrics


def posterior_metrics(true_beta, samples=None, q: GlobalApprox | None = None) -> dict:
    """Negative log density of ``true_beta`` and per-dimension 95% interval coverage.

    Uses the exact density and quantiles of a mean-field ``q`` when given,
    otherwise a Gaussian KDE (Silverman bandwidth) and sample quantiles of
    ``samples`` (at least 100 rows).
    """
    true_beta = np.atleast_1d(np.asarray(true_beta, dtype=np.float64))
    if q is not None:
        nlp = -float(q.logpdf(true_beta))
        lo, hi = q.quantiles([0.025, 0.975])
    else:
        samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
        if len(samples) < MIN_KDE_SAMPLES:
            raise ValueError(f"need at least {MIN_KDE_SAMPLES} samples for a kernel density estimate")
        kde = gaussian_kde(samples.T, bw_method="silverman")
        nlp = -float(kde.logpdf(true_beta[:, None])[0])
        lo, hi = np.quantile(samples, [0.025, 0.975], axis=0)
    contains = [bool(a <= t <= b) for a, t, b in zip(lo, true_beta, hi)]
    return {"nlp_true": nlp, "ci95_contains": contains}


def write_metrics_csv(path, rows):
    """One row per metrics dict; list values are joined with ``;``."""
    rows = list(rows)
    keys = list(dict.fromkeys(k for row in rows for k in row))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow({k: ";".join(map(str, v)) if isinstance(v, (list, tuple)) else v for k, v in row.items()})
