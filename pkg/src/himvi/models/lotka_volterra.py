"""Stochastic Lotka-Volterra predator-prey simulator.

    d prey/dt     =  b1 prey - b2 prey pred
    d pred/dt     = -b2 pred + b3 prey pred

integrated by explicit Euler at ``inner_dt``. Gaussian noise of standard
deviation ``noise_scale`` is added to both populations at each integer time,
populations are clamped at zero after every inner step, and values are
recorded every ``record_every`` time units. The 4-parameter variant uses a
separate predator death rate: ``(b1, b2, b3, b4)`` with ``-b3 pred + b4 prey pred``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..ndcore import ops, value_of
from .base import HimModel

log = logging.getLogger(__name__)

_GRID_TOL = 1e-9


@dataclass(frozen=True)
class LotkaVolterraConfig:
    beta: tuple = (1.0, 0.01, 0.0004)
    init_prey: float = 50.0
    init_predator: float = 100.0
    t_end: float = 30.0
    inner_dt: float = 0.1
    record_every: float = 0.2
    noise_scale: float = 10.0
    max_population: float = math.inf

    def __post_init__(self):
        if self.inner_dt <= 0 or self.t_end <= 0:
            raise ValueError("inner_dt and t_end must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        if self.init_prey <= 0 or self.init_predator <= 0:
            raise ValueError("initial populations must be positive")
        if len(self.beta) not in (3, 4):
            raise ValueError("beta must have 3 or 4 components")
        _steps(self.record_every, self.inner_dt, "record_every")
        _steps(1.0, self.inner_dt, "the unit noise interval")
        _steps(self.t_end, self.inner_dt, "t_end")

    @property
    def n_records(self) -> int:
        return _steps(self.t_end, self.inner_dt, "t_end") // _steps(self.record_every, self.inner_dt, "record_every") + 1

    @property
    def n_noise_times(self) -> int:
        return _steps(self.t_end, self.inner_dt, "t_end") // _steps(1.0, self.inner_dt, "")


def _steps(span: float, dt: float, what: str) -> int:
    k = round(span / dt)
    if k < 1 or abs(k * dt - span) > _GRID_TOL * max(1.0, span):
        raise ValueError(f"{what} ({span}) must be a positive integer multiple of inner_dt ({dt})")
    return k


@dataclass
class Series:
    times: np.ndarray
    prey: np.ndarray
    predator: np.ndarray
    diverged: bool = False

    def __post_init__(self):
        if not (len(self.times) == len(self.prey) == len(self.predator)):
            raise ValueError("times, prey and predator must have equal length")

    def __len__(self):
        return len(self.times)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "prey", "predator"])
        for t, a, b in zip(self.times, self.prey, self.predator):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Series":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["t", "prey", "predator"]:
            raise ValueError("expected header t,prey,predator")
        arr = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=np.float64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.prey, self.predator])


def _rates(beta: np.ndarray) -> tuple:
    beta = np.atleast_2d(beta)
    if beta.shape[1] == 3:
        return beta[:, 0], beta[:, 1], beta[:, 1], beta[:, 2]
    return beta[:, 0], beta[:, 1], beta[:, 2], beta[:, 3]


def integrate(beta, eps, cfg: LotkaVolterraConfig):
    """Batched Euler integration.

    ``beta`` is ``(m, 3|4)``, ``eps`` is ``(m, n_noise_times, 2)`` standard
    normal draws. Returns ``prey, predator`` of shape ``(m, n_records)`` and a
    ``(m,)`` divergence mask; entries recorded after a row diverged are NaN.
    """
    a, b, c, d = _rates(np.asarray(beta, dtype=np.float64))
    m = len(a)
    n_inner = _steps(cfg.t_end, cfg.inner_dt, "t_end")
    rec = _steps(cfg.record_every, cfg.inner_dt, "record_every")
    unit = _steps(1.0, cfg.inner_dt, "")
    eps = np.asarray(eps, dtype=np.float64).reshape(m, -1, 2)
    dt = cfg.inner_dt
    x1 = np.full(m, float(cfg.init_prey))
    x2 = np.full(m, float(cfg.init_predator))
    prey = np.empty((m, cfg.n_records))
    pred = np.empty((m, cfg.n_records))
    prey[:, 0], pred[:, 0] = x1, x2
    diverged = np.zeros(m, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_inner + 1):
            inter = x1 * x2
            x1, x2 = x1 + dt * (a * x1 - b * inter), x2 + dt * (d * inter - c * x2)
            if k % unit == 0:
                j = k // unit - 1
                x1 = x1 + cfg.noise_scale * eps[:, j, 0]
                x2 = x2 + cfg.noise_scale * eps[:, j, 1]
            x1 = np.clip(x1, 0.0, cfg.max_population)
            x2 = np.clip(x2, 0.0, cfg.max_population)
            bad = ~(np.isfinite(x1) & np.isfinite(x2))
            if bad.any():
                diverged |= bad
                x1 = np.where(diverged, np.nan, x1)
                x2 = np.where(diverged, np.nan, x2)
            if k % rec == 0:
                prey[:, k // rec], pred[:, k // rec] = x1, x2
    return prey, pred, diverged


SUMMARY_NAMES = (
    "mean_prey",
    "mean_predator",
    "log_var_prey",
    "log_var_predator",
    "autocorr1_prey",
    "autocorr2_prey",
    "autocorr1_predator",
    "autocorr2_predator",
    "crosscorr",
)


def _autocorr(c, lag):
    num = np.sum(c[:, :-lag] * c[:, lag:], axis=1)
    den = np.sum(c * c, axis=1)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def summary_matrix(prey, predator) -> np.ndarray:
    """Nine summaries per row of ``(m, T)`` prey and predator arrays.

    Means, log(population variance + 1), lag-1 and lag-2 autocorrelations of
    each species and the prey-predator correlation. Correlations of a
    constant series are 0.
    """
    prey, predator = np.atleast_2d(prey), np.atleast_2d(predator)
    cp = prey - prey.mean(axis=1, keepdims=True)
    cq = predator - predator.mean(axis=1, keepdims=True)
    sp, sq = np.sum(cp * cp, axis=1), np.sum(cq * cq, axis=1)
    cross_num = np.sum(cp * cq, axis=1)
    den = np.sqrt(sp * sq)
    cross = np.divide(cross_num, den, out=np.zeros_like(cross_num), where=den > 0)
    T = prey.shape[1]
    cols = [
        prey.mean(axis=1),
        predator.mean(axis=1),
        np.log(sp / T + 1.0),
        np.log(sq / T + 1.0),
        _autocorr(cp, 1) if T > 1 else np.zeros(len(prey)),
        _autocorr(cp, 2) if T > 2 else np.zeros(len(prey)),
        _autocorr(cq, 1) if T > 1 else np.zeros(len(prey)),
        _autocorr(cq, 2) if T > 2 else np.zeros(len(prey)),
        np.clip(cross, -1.0, 1.0),
    ]
    return np.stack(cols, axis=1)


def lv_simulate(cfg: LotkaVolterraConfig, rng) -> Series:
    eps = rng.normal(size=(1, cfg.n_noise_times, 2))
    prey, pred, diverged = integrate(np.asarray(cfg.beta)[None, :], eps, cfg)
    times = np.arange(cfg.n_records) * cfg.record_every
    if diverged[0]:
        keep = int(np.argmax(~np.isfinite(prey[0]) | ~np.isfinite(pred[0])))
        log.warning("Lotka-Volterra state overflowed; series truncated at t=%g", times[keep])
        return Series(times[:keep], prey[0, :keep], pred[0, :keep], diverged=True)
    return Series(times, prey[0], pred[0])


@dataclass(frozen=True)
class LognormalPrior:
    loc: tuple = (0.5, -4.1, -7.3)
    scale: tuple = (1.0, 1.0, 1.0)

    def sample(self, rng, size=None):
        shape = (len(self.loc),) if size is None else (size, len(self.loc))
        return np.exp(rng.normal(size=shape) * np.asarray(self.scale) + np.asarray(self.loc))

    def logpdf(self, beta):
        """Sum of component lognormal log densities; -inf outside the support."""
        bv = value_of(beta)
        if np.any(bv <= 0):
            log.warning("lognormal prior evaluated at a nonpositive point")
            if bv.ndim <= 1:
                return -np.inf
            safe = np.where(bv > 0, bv, 1.0)
            out = self.logpdf(safe)
            return np.where(np.all(bv > 0, axis=-1), out, -np.inf)
        loc, scale = np.asarray(self.loc), np.asarray(self.scale)
        logb = ops.log(beta)
        u = ops.mul(ops.sub(logb, loc), 1.0 / scale)
        k = len(loc)
        const = -np.sum(np.log(scale)) - 0.5 * k * np.log(2 * np.pi)
        return ops.add(ops.sub(ops.mul(ops.sum(ops.square(u), axis=-1), -0.5), ops.sum(logb, axis=-1)), const)


def lv_prior(action, value=None, rng=None, prior: LognormalPrior | None = None):
    prior = prior or LognormalPrior()
    if action == "sample":
        return prior.sample(rng)
    if action == "logpdf":
        return float(prior.logpdf(np.asarray(value, dtype=np.float64)))
    raise ValueError(f"unknown action {action!r}")


@dataclass
class LotkaVolterraModel(HimModel):
    """One data row is a whole series: prey records followed by predator records."""

    config: LotkaVolterraConfig = field(default_factory=LotkaVolterraConfig)
    prior: LognormalPrior = field(default_factory=LognormalPrior)
    summary_features: bool = True

    name = "lotka-volterra"
    positive = True

    def __post_init__(self):
        self.global_dim = len(self.config.beta)
        if len(self.prior.loc) != self.global_dim:
            raise ValueError("prior dimension must match the number of rate parameters")
        self.data_dim = 2 * self.config.n_records
        self.noise_dim = 2 * self.config.n_noise_times

    def prior_logpdf(self, beta):
        return self.prior.logpdf(beta)

    def prior_sample(self, rng, size=None):
        return self.prior.sample(rng, size)

    def simulate_local(self, eps, z, beta, covariates=None):
        prey, pred, _ = integrate(beta, eps, self.config)
        return np.concatenate([prey, pred], axis=1)

    # The ratio network sees the nine summaries (means on a log scale) rather
    # than the raw series; populations of overflowed runs are capped first.
    FEATURE_CAP = 1e100

    @property
    def data_feature_dim(self) -> int:
        return len(SUMMARY_NAMES) if self.summary_features else self.data_dim

    def data_features(self, x):
        if not self.summary_features:
            return x
        x = np.asarray(x, dtype=np.float64)
        x = np.minimum(np.nan_to_num(x, nan=self.FEATURE_CAP, posinf=self.FEATURE_CAP), self.FEATURE_CAP)
        n = self.config.n_records
        s = summary_matrix(x[:, :n], x[:, n:])
        s[:, :2] = np.log1p(s[:, :2])
        return s

    def series(self, row) -> Series:
        n = self.config.n_records
        return Series(np.arange(n) * self.config.record_every, row[:n], row[n:])
