"""Simulator model interface.

A model produces a data row ``x_n`` by a deterministic map of per-datum noise,
an optional local latent ``z_n`` and the global parameters ``beta``. Rows may
start with ``covariate_dim`` observed covariates that are copied rather than
simulated (regression and classification models).

Array conventions: ``beta`` is ``(D,)`` or a batch ``(m, D)``; data rows are
``(m, data_dim)``; locals ``(m, local_dim)``; noise ``(m, noise_dim)``.
"""
from __future__ import annotations

import numpy as np

from ..ndcore import ops, value_of


class HimModel:
    name = "him"
    global_dim: int
    data_dim: int
    noise_dim: int
    local_dim: int = 0
    covariate_dim: int = 0
    positive: bool = False
    flat_prior: bool = False

    # -- prior over globals

    def prior_logpdf(self, beta):
        """log p(beta); ``beta`` may be a tape Var. Batched over leading axes."""
        raise NotImplementedError

    def prior_sample(self, rng, size=None) -> np.ndarray:
        raise NotImplementedError

    def init_global(self, rng, init="scaled") -> np.ndarray:
        """Starting point for the global approximation; a prior draw by default."""
        return np.asarray(self.prior_sample(rng), dtype=np.float64)

    # -- per-datum generative process

    def sample_noise(self, rng, m: int) -> np.ndarray:
        return rng.normal(size=(m, self.noise_dim))

    def local_prior_sample(self, beta, rng) -> np.ndarray:
        beta = np.atleast_2d(beta)
        return np.zeros((beta.shape[0], 0))

    def simulate_local(self, eps, z, beta, covariates=None) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, beta, covariates, rng):
        """Draw ``(x, z)`` for each row of ``beta`` (broadcast against covariates)."""
        beta = np.atleast_2d(beta)
        m = beta.shape[0] if covariates is None else len(covariates)
        beta = np.broadcast_to(beta, (m, self.global_dim))
        z = self.local_prior_sample(beta, rng)
        eps = self.sample_noise(rng, m)
        return self.simulate_local(eps, z, beta, covariates), z

    def covariates_of(self, rows):
        if self.covariate_dim == 0 or rows is None:
            return None
        return np.asarray(rows)[:, : self.covariate_dim]

    # -- inputs to the ratio estimator

    @property
    def data_feature_dim(self) -> int:
        return self.data_dim

    def data_features(self, x):
        """Data slot of the ratio estimator input; the rows themselves by default."""
        return x

    @property
    def global_feature_dim(self) -> int:
        return self.global_dim

    def global_features(self, beta, x, z):
        """Global-parameter slot of the ratio estimator input, one row per datum.

        The default is ``beta`` itself, broadcast over the rows of ``x``.
        """
        m = len(value_of(x))
        bv = value_of(beta)
        if bv.ndim == 2:
            return beta
        return ops.broadcast_to(ops.reshape(beta, (1, self.global_dim)), (m, self.global_dim))

    # -- only for models with tractable likelihoods

    def loglik(self, x, beta):
        raise NotImplementedError(f"{self.name} has no tractable likelihood")


def normal_logpdf(x, loc, scale):
    """Sum of independent normal log densities over the last axis; tape-aware."""
    u = ops.mul(ops.sub(x, loc), 1.0 / np.asarray(scale, dtype=np.float64))
    d = value_of(x).shape[-1]
    const = -np.sum(np.log(np.broadcast_to(scale, (d,)))) - 0.5 * d * np.log(2 * np.pi)
    return ops.add(ops.mul(ops.sum(ops.square(u), axis=-1), -0.5), const)
