"""Models with tractable likelihoods, used as oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ndcore import ops
from .base import HimModel, normal_logpdf


def normal_normal_posterior(prior_mean, prior_var, lik_var, observations):
    """Exact posterior of beta for x_i ~ N(beta, lik_var), beta ~ N(prior_mean, prior_var)."""
    if prior_var <= 0 or lik_var <= 0:
        raise ValueError("variances must be positive")
    obs = np.asarray(observations, dtype=np.float64).ravel()
    precision = 1.0 / prior_var + obs.size / lik_var
    mean = (prior_mean / prior_var + obs.sum() / lik_var) / precision
    return float(mean), float(1.0 / precision)


@dataclass
class NormalNormalModel(HimModel):
    prior_mean: float = 0.0
    prior_std: float = 1.0
    noise_std: float = 1.0

    name = "normal-normal"
    global_dim = 1
    data_dim = 1
    noise_dim = 1

    def prior_logpdf(self, beta):
        return normal_logpdf(beta, self.prior_mean, self.prior_std)

    def prior_sample(self, rng, size=None):
        shape = (1,) if size is None else (size, 1)
        return self.prior_mean + self.prior_std * rng.normal(size=shape)

    def simulate_local(self, eps, z, beta, covariates=None):
        return np.asarray(beta)[:, :1] + self.noise_std * np.asarray(eps)

    def loglik(self, x, beta):
        """Per-row log N(x_n; beta, noise_std^2)."""
        return normal_logpdf(ops.reshape(x, (-1, 1)), beta, self.noise_std)

    def posterior(self, x):
        mean, var = normal_normal_posterior(self.prior_mean, self.prior_std**2, self.noise_std**2, x)
        return np.array([mean]), np.array([[var]])

    def generate(self, rng, n, beta=None):
        beta = self.prior_sample(rng) if beta is None else np.atleast_1d(np.asarray(beta, dtype=np.float64))
        x = self.simulate_local(rng.normal(size=(n, 1)), None, np.broadcast_to(beta, (n, 1)))
        return x, beta


@dataclass
class LinearRegressionModel(HimModel):
    """y_n = x_n W + noise, W ~ N(0, prior_std^2 I); rows are ``(x_n, y_n)``.

    ``beta`` is ``W`` flattened row-major, shape ``feature_dim * output_dim``.
    """

    feature_dim: int = 1
    output_dim: int = 2
    prior_std: float = 1.0
    noise_std: float = 0.5

    name = "linear-regression"

    def __post_init__(self):
        self.global_dim = self.feature_dim * self.output_dim
        self.data_dim = self.feature_dim + self.output_dim
        self.covariate_dim = self.feature_dim
        self.noise_dim = self.output_dim

    def weights(self, beta):
        return ops.reshape(beta, (self.feature_dim, self.output_dim))

    def prior_logpdf(self, beta):
        return normal_logpdf(beta, 0.0, self.prior_std)

    def prior_sample(self, rng, size=None):
        shape = (self.global_dim,) if size is None else (size, self.global_dim)
        return self.prior_std * rng.normal(size=shape)

    def simulate_local(self, eps, z, beta, covariates=None):
        X = np.asarray(covariates, dtype=np.float64)
        W = np.asarray(beta, dtype=np.float64).reshape(-1, self.feature_dim, self.output_dim)
        y = np.einsum("mf,mfo->mo", X, W) + self.noise_std * np.asarray(eps)
        return np.concatenate([X, y], axis=1)

    def loglik(self, x, beta):
        """Per-row log p(y_n | x_n, W); tape-aware in ``beta``."""
        x = np.asarray(x, dtype=np.float64)
        X, Y = x[:, : self.feature_dim], x[:, self.feature_dim :]
        mean = ops.matmul(X, self.weights(beta))
        return normal_logpdf(Y, mean, self.noise_std)

    def posterior(self, x):
        """Exact Gaussian posterior over flattened W: ``(mean, cov)``."""
        x = np.asarray(x, dtype=np.float64)
        X, Y = x[:, : self.feature_dim], x[:, self.feature_dim :]
        prec = np.eye(self.feature_dim) / self.prior_std**2 + X.T @ X / self.noise_std**2
        cov_f = np.linalg.inv(prec)
        mean_w = cov_f @ X.T @ Y / self.noise_std**2  # (F, O)
        # outputs are independent given X; W[f, o] is flattened row-major
        cov = np.kron(cov_f, np.eye(self.output_dim))
        return mean_w.ravel(), cov

    def generate(self, rng, n, beta=None):
        beta = self.prior_sample(rng) if beta is None else np.asarray(beta, dtype=np.float64)
        X = rng.normal(size=(n, self.feature_dim))
        rows = self.simulate_local(rng.normal(size=(n, self.output_dim)), None, np.broadcast_to(beta, (n, self.global_dim)), X)
        return rows, beta


def linreg_model(n=50, feature_dim=1, output_dim=2, rng=None, noise_std=0.5, prior_std=1.0):
    """Bayesian linear regression model and (if ``rng`` is given) a simulated dataset."""
    model = LinearRegressionModel(feature_dim, output_dim, prior_std, noise_std)
    if rng is None:
        return model
    data, beta = model.generate(rng, n)
    return model, data, beta
