"""Bayesian GAN classifier and its Bayesian neural network counterpart.

The GAN classifier generates a label by feeding features concatenated with a
scalar standard normal draw through a 2-layer ReLU network and taking the sign
of the output. Hidden units are layer-normalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from ..ndcore import init_mlp, mlp_apply, ops, value_of
from .base import HimModel, normal_logpdf


def read_classification_csv(path):
    """Feature columns then a final label column in {-1, +1}; first line is a header."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    X, y = data[:, :-1], data[:, -1]
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError(f"{path}: labels must be -1 or +1")
    return X, y


class _Layout:
    """Flat parameter vector <-> named MLP tensors."""

    def __init__(self, shapes: dict):
        self.shapes = shapes
        self.slices = {}
        start = 0
        for k, s in shapes.items():
            n = int(np.prod(s))
            self.slices[k] = (start, start + n)
            start += n
        self.size = start

    def unflatten(self, theta):
        """Named tensors from ``theta`` of shape ``(P,)`` (tape-aware) or ``(m, P)``."""
        tv = value_of(theta)
        out = {}
        for k, s in self.shapes.items():
            lo, hi = self.slices[k]
            if tv.ndim == 1:
                out[k] = ops.reshape(ops.getitem(theta, slice(lo, hi)), s)
            else:
                out[k] = tv[:, lo:hi].reshape((tv.shape[0],) + s)
        return out

    def flatten(self, params) -> np.ndarray:
        return np.concatenate([np.ravel(params[k]) for k in self.shapes])


def _batched_forward(p, inp, layer_norm):
    """2-layer forward with per-row weights ``p[k]`` of shape ``(m, ...)``."""
    h = np.einsum("mi,mih->mh", inp, p["W0"]) + p["b0"]
    if layer_norm:
        c = h - h.mean(axis=-1, keepdims=True)
        h = c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + 1e-5) * p["g0"] + p["s0"]
    h = np.maximum(h, 0.0)
    return np.einsum("mh,mh->m", h, p["W1"][..., 0]) + p["b1"][:, 0]


@dataclass
class BayesianGanClassifier(HimModel):
    feature_dim_in: int = 8
    hidden: int = 16
    layer_norm: bool = True
    ratio_features: str = "hidden"
    n_feature_draws: int = 8

    name = "bayesian-gan"
    noise_dim = 1

    def __post_init__(self):
        D, H = self.feature_dim_in, self.hidden
        shapes = {"W0": (D + 1, H), "b0": (H,)}
        if self.layer_norm:
            shapes.update({"g0": (H,), "s0": (H,)})
        shapes.update({"W1": (H, 1), "b1": (1,)})
        self.layout = _Layout(shapes)
        self.global_dim = self.layout.size
        self.covariate_dim = D
        self.data_dim = D + 1
        if self.ratio_features not in ("hidden", "params"):
            raise ValueError("ratio_features must be 'hidden' or 'params'")
        # fixed noise quantiles at which the network output is summarised
        k = self.n_feature_draws
        self.feature_eps = norm.ppf((np.arange(k) + 0.5) / k)

    @property
    def normalize(self):
        return "layer_norm" if self.layer_norm else "none"

    def prior_logpdf(self, beta):
        return normal_logpdf(beta, 0.0, 1.0)

    def prior_sample(self, rng, size=None):
        shape = (self.global_dim,) if size is None else (size, self.global_dim)
        return rng.normal(size=shape)

    def init_global(self, rng, init="scaled"):
        D, H = self.feature_dim_in, self.hidden
        return self.layout.flatten(init_mlp(rng, [D + 1, H, 1], init=init, layer_norm=self.layer_norm))

    def logits(self, theta, X, eps):
        """Network output for features ``X`` (m, D) and noise ``eps`` (m,)."""
        tv = value_of(theta)
        X = np.asarray(X, dtype=np.float64)
        inp = np.concatenate([X, np.asarray(eps, dtype=np.float64).reshape(-1, 1)], axis=1)
        if tv.ndim == 2:
            return _batched_forward(self.layout.unflatten(tv), inp, self.layer_norm)
        params = self.layout.unflatten(theta)
        return ops.reshape(mlp_apply(params, inp, normalize=self.normalize), (-1,))

    def simulate_local(self, eps, z, beta, covariates=None):
        X = np.asarray(covariates, dtype=np.float64)
        out = self.logits(np.asarray(beta), X, np.asarray(eps)[:, 0])
        return np.concatenate([X, np.where(out >= 0, 1.0, -1.0)[:, None]], axis=1)

    @property
    def global_feature_dim(self):
        return self.n_feature_draws if self.ratio_features == "hidden" else self.global_dim

    def global_features(self, beta, x, z):
        if self.ratio_features == "params":
            return super().global_features(beta, x, z)
        X = np.asarray(value_of(x))[:, : self.feature_dim_in]
        m, k = len(X), self.n_feature_draws
        Xk = np.repeat(X, k, axis=0)
        ek = np.tile(self.feature_eps, m)
        bv = value_of(beta)
        if bv.ndim == 2:
            return self.logits(np.repeat(bv, k, axis=0), Xk, ek).reshape(m, k)
        return ops.reshape(self.logits(beta, Xk, ek), (m, k))


def gan_classify_forward(model: BayesianGanClassifier, theta, x_n, eps_n) -> int:
    theta = model.layout.flatten(theta) if isinstance(theta, dict) else np.asarray(theta, dtype=np.float64)
    out = model.logits(theta, np.atleast_2d(x_n), np.atleast_1d(eps_n))
    return 1 if float(np.ravel(out)[0]) >= 0 else -1


def predictive_label(model: BayesianGanClassifier, theta, X, n_draws: int, rng):
    """Majority vote over noise draws (and over rows of ``theta`` if it is 2-d).

    Returns ``(labels, fraction_of_plus_one)``; ties go to +1.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    thetas = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    m = len(X)
    votes = np.zeros(m)
    total = 0
    for th in thetas:
        for _ in range(n_draws):
            out = np.asarray(model.logits(th, X, rng.normal(size=m)))
            votes += out >= 0
            total += 1
    frac = votes / total
    return np.where(frac >= 0.5, 1, -1), frac


@dataclass
class BayesianNNClassifier:
    """Same network without injected noise; Bernoulli likelihood on the logit."""

    feature_dim_in: int = 8
    hidden: int = 16
    layer_norm: bool = True

    def __post_init__(self):
        D, H = self.feature_dim_in, self.hidden
        shapes = {"W0": (D, H), "b0": (H,)}
        if self.layer_norm:
            shapes.update({"g0": (H,), "s0": (H,)})
        shapes.update({"W1": (H, 1), "b1": (1,)})
        self.layout = _Layout(shapes)
        self.global_dim = self.layout.size

    def prior_logpdf(self, theta):
        return normal_logpdf(theta, 0.0, 1.0)

    def logits(self, theta, X):
        params = self.layout.unflatten(theta)
        norm_ = "layer_norm" if self.layer_norm else "none"
        return ops.reshape(mlp_apply(params, np.asarray(X, dtype=np.float64), normalize=norm_), (-1,))

    def loglik(self, theta, X, y):
        """Sum of log sigmoid(y * logit)."""
        return ops.sum(ops.log_sigmoid(ops.mul(self.logits(theta, X), np.asarray(y, dtype=np.float64))))

    def predict(self, thetas, X):
        thetas = np.atleast_2d(thetas)
        probs = np.mean([1.0 / (1.0 + np.exp(-np.asarray(self.logits(t, X)))) for t in thetas], axis=0)
        return np.where(probs >= 0.5, 1, -1), probs
