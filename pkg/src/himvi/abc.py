"""Approximate Bayesian computation baselines.

Rejection, MCMC and SMC samplers over a generic :class:`AbcProblem`: a prior,
a batched simulator of summary statistics and the observed summaries.
Distances are Euclidean on summaries divided by their median absolute
deviation over a pilot run from the prior. For positive models, proposals and
SMC kernels act on log beta.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .models.lotka_volterra import LotkaVolterraModel, Series, summary_matrix

log = logging.getLogger(__name__)

CHUNK = 1000
MIN_ESS = 5.0


class AbcError(RuntimeError):
    pass


def summary_stats(series: Series) -> np.ndarray:
    """Nine summaries of one predator-prey series (see :func:`summary_matrix`)."""
    return summary_matrix(series.prey[None], series.predator[None])[0]


@dataclass(frozen=True)
class AbcProblem:
    """``simulate(betas, rng)`` returns one summary row per beta row; non-finite rows never match."""

    prior_sample: Callable
    prior_logpdf: Callable
    simulate: Callable
    observed: np.ndarray
    positive: bool = False


def lv_problem(model: LotkaVolterraModel, observed_row) -> AbcProblem:
    n = model.config.n_records
    row = np.asarray(observed_row, dtype=np.float64)

    def simulate(betas, rng):
        x, _ = model.simulate(betas, None, rng)
        return summary_matrix(x[:, :n], x[:, n:])

    return AbcProblem(
        prior_sample=model.prior_sample,
        prior_logpdf=lambda b: np.asarray(model.prior_logpdf(b)),
        simulate=simulate,
        observed=summary_matrix(row[None, :n], row[None, n:])[0],
        positive=True,
    )


def normal_normal_problem(model, x) -> AbcProblem:
    """Summary is the sample mean of a dataset the size of ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    n = len(x)

    def simulate(betas, rng):
        rows, _ = model.simulate(np.repeat(betas, n, axis=0), None, rng)
        return rows.reshape(len(betas), n).mean(axis=1, keepdims=True)

    return AbcProblem(
        prior_sample=model.prior_sample,
        prior_logpdf=lambda b: np.asarray(model.prior_logpdf(b)),
        simulate=simulate,
        observed=x.mean(axis=0),
    )


@dataclass(frozen=True)
class AbcConfig:
    """``schedule`` drives SMC; when absent it is ``tolerance * decay**g`` for ``n_generations``.

    ``n_simulations`` is the rejection budget, the length of each MCMC chain
    and the per-generation SMC budget.
    """

    tolerance: float = 1.0
    schedule: tuple | None = None
    n_simulations: int = 10_000
    proposal_std: float = 0.1
    burn_in: int = 0
    n_chains: int = 1
    population_size: int = 500
    decay: float = 0.5
    n_generations: int = 3
    pilot_size: int = 1000
    distance: str = "euclidean_on_standardized_summaries"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if min(self.n_simulations, self.population_size, self.pilot_size, self.n_generations, self.n_chains) < 1:
            raise ValueError("budgets and sizes must be positive")
        if self.proposal_std < 0 or not 0 <= self.burn_in < self.n_simulations:
            raise ValueError("need proposal_std >= 0 and 0 <= burn_in < n_simulations")
        if not 0 < self.decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        if self.schedule is not None:
            s = np.asarray(self.schedule, dtype=np.float64)
            if s.size == 0 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
                raise ValueError("schedule must be positive and strictly decreasing")
        if self.distance != "euclidean_on_standardized_summaries":
            raise ValueError(f"unknown distance {self.distance!r}")

    @property
    def tolerances(self) -> tuple:
        if self.schedule is not None:
            return tuple(float(e) for e in self.schedule)
        return tuple(self.tolerance * self.decay**g for g in range(self.n_generations))


@dataclass
class AbcResult:
    method: str
    samples: np.ndarray
    weights: np.ndarray
    generation: np.ndarray
    n_sims: int
    n_accepted: int
    distances: np.ndarray | None = None
    populations: list = field(default_factory=list)
    aborted: bool = False

    @property
    def rate(self) -> float:
        return self.n_accepted / self.n_sims


def acceptance_rate(distances, tolerance) -> float:
    return float(np.mean(np.asarray(distances) <= tolerance))


class _Distance:
    def __init__(self, problem: AbcProblem, n_pilot: int, rng):
        pilot = _simulate_chunked(problem, problem.prior_sample(rng.child(0), n_pilot), rng.child(1))
        med = np.nanmedian(pilot, axis=0)
        mad = np.nanmedian(np.abs(pilot - med), axis=0)
        self.scale = np.where(np.isfinite(mad) & (mad > 0), mad, 1.0)
        self.observed = problem.observed

    def __call__(self, summaries) -> np.ndarray:
        d = np.sqrt(np.sum(((summaries - self.observed) / self.scale) ** 2, axis=-1))
        return np.where(np.isfinite(d), d, np.inf)


def worker_count() -> int:
    """Worker threads for simulation: ``LFVI_THREADS`` if set, else the machine's cores."""
    env = os.environ.get("LFVI_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer LFVI_THREADS=%r", env)
    return os.cpu_count() or 1


def _simulate_chunked(problem, betas, rng) -> np.ndarray:
    """Simulate in fixed chunks, chunk ``k`` on stream ``rng.child(k)``; merged in chunk order."""
    starts = range(0, len(betas), CHUNK)

    def run(k):
        with np.errstate(all="ignore"):
            return problem.simulate(betas[starts[k] : starts[k] + CHUNK], rng.child(k))

    workers = min(worker_count(), len(starts))
    if workers <= 1:
        parts = [run(k) for k in range(len(starts))]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    return np.concatenate(parts, axis=0)


def _to_free(problem, betas):
    return np.log(betas) if problem.positive else betas


def _from_free(problem, u):
    return np.exp(u) if problem.positive else u


def _free_logprior(problem, u):
    """Prior log density of the unconstrained coordinates (includes the log Jacobian)."""
    lp = problem.prior_logpdf(_from_free(problem, u))
    return lp + np.sum(u, axis=-1) if problem.positive else lp


def _rejection_draws(problem, tolerance, n_sims, dist, rng):
    betas = problem.prior_sample(rng.child(0), n_sims)
    d = dist(_simulate_chunked(problem, betas, rng.child(1)))
    return betas, d


def rejection_abc(problem: AbcProblem, cfg: AbcConfig, rng) -> AbcResult:
    dist = _Distance(problem, cfg.pilot_size, rng.child(0))
    return _rejection(problem, cfg.tolerance, cfg.n_simulations, dist, rng.child(1))


def _rejection(problem, tolerance, n_sims, dist, rng) -> AbcResult:
    betas, d = _rejection_draws(problem, tolerance, n_sims, dist, rng)
    keep = d <= tolerance
    n = int(keep.sum())
    if n == 0:
        raise AbcError(f"no simulation within tolerance {tolerance:g} of the observation; try a larger tolerance")
    return AbcResult(
        "rejection", betas[keep], np.full(n, 1.0 / n), np.ones(n, dtype=int), n_sims, n, distances=d
    )


def mcmc_abc(problem: AbcProblem, cfg: AbcConfig, rng) -> AbcResult:
    """Likelihood-free Metropolis with a spherical Gaussian proposal.

    ``n_chains`` independent chains run side by side; each starts from a
    distinct prior draw (within ``n_simulations`` tries) whose simulation
    lands within tolerance. Draws after ``burn_in`` are pooled.
    """
    dist = _Distance(problem, cfg.pilot_size, rng.child(0))
    betas, d = _rejection_draws(problem, cfg.tolerance, cfg.n_simulations, dist, rng.child(1))
    hits = np.flatnonzero(d <= cfg.tolerance)
    if hits.size < cfg.n_chains:
        raise AbcError(
            f"only {hits.size} of {cfg.n_chains} initial states within tolerance {cfg.tolerance:g} "
            f"after {cfg.n_simulations} prior draws"
        )
    u = _to_free(problem, betas[hits[: cfg.n_chains]])
    lp = _free_logprior(problem, u)
    step_rng = rng.child(2)
    chain = np.empty((cfg.n_simulations, cfg.n_chains, u.shape[1]))
    moves = 0
    for t in range(cfg.n_simulations):
        proposal = u + cfg.proposal_std * step_rng.normal(size=u.shape)
        lp_new = _free_logprior(problem, proposal)
        log_u = np.log(step_rng.uniform(size=cfg.n_chains))
        with np.errstate(all="ignore"):
            s = problem.simulate(_from_free(problem, proposal), step_rng)
        take = np.isfinite(lp_new) & (log_u < lp_new - lp) & (dist(s) <= cfg.tolerance)
        u = np.where(take[:, None], proposal, u)
        lp = np.where(take, lp_new, lp)
        moves += int(take.sum())
        chain[t] = _from_free(problem, u)
    kept = chain[cfg.burn_in :].reshape(-1, u.shape[1])
    n, steps = len(kept), cfg.n_simulations * cfg.n_chains
    log.info("MCMC-ABC accepted %d of %d moves", moves, steps)
    return AbcResult("mcmc", kept, np.full(n, 1.0 / n), np.ones(n, dtype=int), steps, moves)


def smc_abc(problem: AbcProblem, cfg: AbcConfig, rng) -> AbcResult:
    """Population Monte Carlo over a decreasing tolerance schedule.

    Generation 1 is rejection at the first tolerance. Later generations
    resample by weight, perturb with a Gaussian kernel whose per-dimension std
    is the weighted population std, and reweight by prior over kernel mixture.
    A generation whose effective sample size falls below 5 aborts the run and
    the last complete population is returned.
    """
    tolerances = cfg.tolerances
    dist = _Distance(problem, cfg.pilot_size, rng.child(0))
    first = _rejection(problem, tolerances[0], cfg.n_simulations, dist, rng.child(1))
    betas, weights = first.samples, first.weights
    populations = [{"samples": betas, "weights": weights, "tolerance": tolerances[0]}]
    n_sims, aborted = first.n_sims, False

    for g, eps in enumerate(tolerances[1:], start=2):
        gen_rng = rng.child(g)
        u = _to_free(problem, betas)
        mean = np.average(u, axis=0, weights=weights)
        sd = np.sqrt(np.average((u - mean) ** 2, axis=0, weights=weights))
        sd = np.where(sd > 0, sd, 1e-12)
        new_u, spent = [], 0
        while sum(len(a) for a in new_u) < cfg.population_size and spent < cfg.n_simulations:
            k = min(CHUNK, cfg.n_simulations - spent)
            idx = gen_rng.choice(len(u), size=k, p=weights)
            cand = u[idx] + sd * gen_rng.normal(size=(k, u.shape[1]))
            ok = np.isfinite(_free_logprior(problem, cand))
            with np.errstate(all="ignore"):
                s = problem.simulate(_from_free(problem, cand), gen_rng)
            new_u.append(cand[ok & (dist(s) <= eps)])
            spent += k
        n_sims += spent
        cand = np.concatenate(new_u, axis=0)[: cfg.population_size]
        if len(cand) == 0:
            log.warning("SMC-ABC generation %d accepted nothing; stopping", g)
            aborted = True
            break
        # prior over the kernel mixture, all on the unconstrained scale
        z = (cand[:, None, :] - u[None, :, :]) / sd
        log_kernel = -0.5 * np.sum(z**2, axis=-1) - np.sum(np.log(sd))
        log_w = _free_logprior(problem, cand) - logsumexp(log_kernel, b=weights[None, :], axis=1)
        w = np.exp(log_w - logsumexp(log_w))
        w /= w.sum()
        ess = 1.0 / np.sum(w**2)
        if ess < MIN_ESS:
            log.warning("SMC-ABC population collapsed at generation %d (ESS %.2f)", g, ess)
            aborted = True
            break
        betas, weights = _from_free(problem, cand), w
        populations.append({"samples": betas, "weights": weights, "tolerance": eps})

    n = len(betas)
    gen = len(populations)
    return AbcResult(
        "smc", betas, weights, np.full(n, gen), n_sims, n, populations=populations, aborted=aborted
    )


def write_abc_outputs(out_dir, result: AbcResult):
    """``posterior.jsonl`` (beta, weight, generation) and ``acceptance.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "posterior.jsonl", "w") as fh:
        for b, w, g in zip(result.samples, result.weights, result.generation):
            fh.write(json.dumps({"beta": [float(v) for v in b], "weight": float(w), "generation": int(g)}) + "\n")
    summary = {"n_sims": int(result.n_sims), "n_accepted": int(result.n_accepted), "rate": float(result.rate)}
    (out / "acceptance.json").write_text(json.dumps(summary, indent=2) + "\n")
