"""Variational families over global and local latent variables.

Global: reparameterized mean-field normal, mean-field lognormal (positive
support) or a point mass. Local: an implicit family z = MLP(delta, x, beta)
with standard normal delta; it has no density by design.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import norm

from .ndcore import init_mlp, mlp_apply, ops, param_hash, value_of

KINDS = ("meanfield_normal", "meanfield_lognormal", "point_mass")
HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


@dataclass(frozen=True)
class GlobalApprox:
    """``params`` holds ``loc`` and ``log_scale`` (mean-field kinds) or ``value`` (point mass)."""

    kind: str
    params: dict

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown global family {self.kind!r}; expected one of {KINDS}")
        want = {"value"} if self.kind == "point_mass" else {"loc", "log_scale"}
        if set(self.params) != want:
            raise ValueError(f"{self.kind} needs parameters {sorted(want)}")

    @property
    def dim(self) -> int:
        return len(next(iter(self.params.values())))

    @property
    def is_point_mass(self) -> bool:
        return self.kind == "point_mass"

    def hash(self) -> str:
        return param_hash(self.params)

    def with_params(self, params) -> "GlobalApprox":
        return replace(self, params={k: np.asarray(v, dtype=np.float64) for k, v in params.items()})

    def mean_std(self):
        """Mean and standard deviation of beta per dimension."""
        if self.is_point_mass:
            v = self.params["value"]
            return v.copy(), np.zeros_like(v)
        mu, sigma = self.params["loc"], np.exp(self.params["log_scale"])
        if self.kind == "meanfield_normal":
            return mu.copy(), sigma
        mean = np.exp(mu + 0.5 * sigma**2)
        return mean, mean * np.sqrt(np.expm1(sigma**2))

    def logpdf(self, beta) -> np.ndarray:
        """Exact log q(beta) for mean-field kinds; batched over leading axes."""
        if self.is_point_mass:
            raise ValueError("a point mass has no density")
        beta = np.asarray(beta, dtype=np.float64)
        mu, log_sigma = self.params["loc"], self.params["log_scale"]
        if self.kind == "meanfield_lognormal":
            with np.errstate(divide="ignore", invalid="ignore"):
                u = np.log(beta)
            jac = -np.sum(u, axis=-1)
        else:
            u, jac = beta, 0.0
        delta = (u - mu) / np.exp(log_sigma)
        out = np.sum(-0.5 * delta**2 - log_sigma - HALF_LOG_2PI, axis=-1) + jac
        if self.kind == "meanfield_lognormal":
            out = np.where(np.all(beta > 0, axis=-1), out, -np.inf)
        return out

    def quantiles(self, probs):
        """Per-dimension quantiles at ``probs``; shape ``(len(probs), dim)``."""
        probs = np.atleast_1d(probs)
        if self.is_point_mass:
            return np.tile(self.params["value"], (len(probs), 1))
        q = self.params["loc"] + np.multiply.outer(norm.ppf(probs), np.exp(self.params["log_scale"]))
        return np.exp(q) if self.kind == "meanfield_lognormal" else q


def make_global_approx(kind, dim, loc=None, log_scale=None, value=None) -> GlobalApprox:
    if kind == "point_mass":
        v = np.zeros(dim) if value is None else np.broadcast_to(np.asarray(value, dtype=np.float64), (dim,))
        return GlobalApprox(kind, {"value": v.copy()})
    loc = np.zeros(dim) if loc is None else np.broadcast_to(np.asarray(loc, dtype=np.float64), (dim,))
    log_scale = np.zeros(dim) if log_scale is None else np.broadcast_to(np.asarray(log_scale, dtype=np.float64), (dim,))
    return GlobalApprox(kind, {"loc": loc.copy(), "log_scale": log_scale.copy()})


def global_sample(q: GlobalApprox, rng=None, params=None, delta=None):
    """Draw beta = T(delta; lambda). Returns ``(beta, log_q)``; ``log_q`` is None for a point mass.

    ``params`` may be tape Vars, in which case both outputs are on the tape.
    ``delta`` overrides the standard normal draw (shape ``(dim,)`` or ``(n, dim)``).
    """
    params = q.params if params is None else params
    if q.is_point_mass:
        return params["value"], None
    if delta is None:
        delta = rng.normal(size=q.dim)
    delta = np.asarray(delta, dtype=np.float64)
    log_sigma = params["log_scale"]
    u = ops.add(params["loc"], ops.mul(ops.exp(log_sigma), delta))
    # log q at the drawn point, written through delta so the path to lambda is exact
    log_q = ops.sub(ops.mul(np.sum(delta**2, axis=-1), -0.5), ops.add(ops.sum(log_sigma), q.dim * HALF_LOG_2PI))
    if q.kind == "meanfield_normal":
        return u, log_q
    return ops.exp(u), ops.sub(log_q, ops.sum(u, axis=-1))


def entropy_term(q: GlobalApprox, beta, log_q, prior_logpdf_fn):
    """log p(beta) - log q(beta); for a point mass, log p(beta) alone.

    ``prior_logpdf_fn=None`` denotes a flat prior, whose log density is taken as 0.
    """
    log_p = 0.0 if prior_logpdf_fn is None else prior_logpdf_fn(beta)
    if q.is_point_mass:
        return log_p
    return ops.sub(log_p, log_q)


@dataclass(frozen=True)
class LocalApprox:
    """Amortized implicit local family: z_n = MLP_phi(delta_n, x_n, beta_features)."""

    params: dict
    noise_dim: int
    x_dim: int
    beta_dim: int
    local_dim: int

    def hash(self) -> str:
        return param_hash(self.params)

    def with_params(self, params) -> "LocalApprox":
        return replace(self, params={k: np.asarray(v, dtype=np.float64) for k, v in params.items()})


def make_local_approx(rng, x_dim, beta_dim, local_dim, noise_dim=None, hidden=(64,), init="scaled") -> LocalApprox:
    """``beta_dim=0`` makes the local family ignore beta (used when beta is a point mass)."""
    noise_dim = local_dim if noise_dim is None else noise_dim
    params = init_mlp(rng, [noise_dim + x_dim + beta_dim, *hidden, local_dim], init=init)
    return LocalApprox(params, noise_dim, x_dim, beta_dim, local_dim)


def local_sample(q: LocalApprox, x, beta, rng=None, params=None, delta=None):
    """z_n for every row of ``x``; ``beta`` is ``(beta_dim,)`` or per-row, possibly a tape Var."""
    params = q.params if params is None else params
    x = np.asarray(x, dtype=np.float64)
    m = len(x)
    if delta is None:
        delta = rng.normal(size=(m, q.noise_dim))
    parts = [np.asarray(delta, dtype=np.float64), x]
    if q.beta_dim:
        b = beta if value_of(beta).ndim == 2 else ops.broadcast_to(ops.reshape(beta, (1, q.beta_dim)), (m, q.beta_dim))
        parts.append(b)
    return mlp_apply(params, ops.concat(parts, axis=1))


def write_posterior_samples(path, betas, log_qs=None):
    """JSON lines, one ``{"beta": [...], "log_q": number|null}`` per draw."""
    betas = np.atleast_2d(betas)
    with open(path, "w") as fh:
        for i, b in enumerate(betas):
            lq = None if log_qs is None else float(log_qs[i])
            fh.write(json.dumps({"beta": [float(v) for v in b], "log_q": lq}) + "\n")


def read_posterior_samples(path):
    betas, log_qs = [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            betas.append(rec["beta"])
            log_qs.append(rec["log_q"])
    return np.array(betas), log_qs


def posterior_draws(q: GlobalApprox, rng, n: int):
    """``(betas, log_q)`` for ``n`` independent draws; ``log_q`` is None for a point mass."""
    if q.is_point_mass:
        return np.tile(q.params["value"], (n, 1)), None
    beta, log_q = global_sample(q, delta=rng.normal(size=(n, q.dim)))
    return np.asarray(beta), np.asarray(log_q)
