"""Log density-ratio estimation by probabilistic classification.

The estimator r(x, z, beta) is an MLP emitting one logit per row. Trained to
tell model-simulated rows (label 1) from rows pairing observed data with the
variational local draws (label 0), its optimum under either loss is the log
ratio of the two joint densities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .ndcore import (
    AdamState,
    Tape,
    adam_step,
    clip_by_global_norm,
    grad,
    init_mlp,
    mlp_apply,
    ops,
    param_hash,
    value_of,
)

log = logging.getLogger(__name__)

DEFAULT_HIDDEN = (64, 64)
STATS_MOMENTUM = 0.99
SCALE_FLOOR = 1e-3


@dataclass(frozen=True)
class RatioEstimator:
    """Snapshot of the ratio network and its input standardization.

    ``slots`` maps ``"x"``, ``"z"`` and ``"beta"`` to column ranges of the
    concatenated input. Running statistics start unset and are initialized
    from the first training batch.
    """

    params: dict
    slots: dict
    momentum: float = STATS_MOMENTUM
    scale_floor: float = SCALE_FLOOR
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    var: np.ndarray | None = field(default=None, repr=False)
    standardize: bool = True

    @property
    def input_dim(self) -> int:
        return max(stop for _, stop in self.slots.values())

    def hash(self) -> str:
        return param_hash(self.params)

    def with_stats(self, batch) -> "RatioEstimator":
        """Fold one batch of raw inputs into the running mean and variance."""
        if not self.standardize:
            return self
        batch = np.asarray(batch, dtype=np.float64)
        mu, var = batch.mean(axis=0), batch.var(axis=0)
        if self.mean is None:
            new_mu, new_var = mu, var
        else:
            a = self.momentum
            new_mu = a * self.mean + (1 - a) * mu
            new_var = a * self.var + (1 - a) * var
        scale = np.maximum(np.sqrt(new_var), self.scale_floor)
        return replace(self, mean=new_mu, var=new_var, scale=scale)

    def standardized(self, inputs):
        if not self.standardize or self.mean is None:
            return inputs
        return ops.mul(ops.sub(inputs, self.mean), 1.0 / self.scale)

    def logits(self, inputs, params=None):
        """r for each row of ``inputs``; pass tape Vars as ``params`` to differentiate."""
        params = self.params if params is None else params
        width = value_of(inputs).shape[-1]
        if width != self.input_dim:
            raise ValueError(f"ratio input width {width}, expected {self.input_dim}")
        return ops.reshape(mlp_apply(params, self.standardized(inputs)), (-1,))


def make_ratio_estimator(rng, x_dim, z_dim, beta_dim, hidden=DEFAULT_HIDDEN, init="scaled", **kwargs) -> RatioEstimator:
    slots, start = {}, 0
    for name, d in (("x", x_dim), ("z", z_dim), ("beta", beta_dim)):
        slots[name] = (start, start + d)
        start += d
    params = init_mlp(rng, [start, *hidden, 1], init=init)
    return RatioEstimator(params=params, slots=slots, **kwargs)


def ratio_inputs(x, z, beta_features):
    """Concatenate the x, z and beta slots (any may be a tape Var; empty slots are skipped)."""
    parts = [p for p in (x, z, beta_features) if p is not None and value_of(p).shape[-1] > 0]
    if len(parts) == 1:
        return parts[0]
    return ops.concat(parts, axis=-1)


def log_loss(r_p, r_q):
    """mean softplus(-r) over p-rows plus mean softplus(r) over q-rows."""
    _check_nonempty(r_p, r_q)
    return ops.add(ops.mean(ops.softplus(ops.neg(r_p))), ops.mean(ops.softplus(r_q)))


def hinge_loss(r_p, r_q):
    _check_nonempty(r_p, r_q)
    return ops.add(ops.mean(ops.relu(ops.sub(1.0, r_p))), ops.mean(ops.relu(ops.add(r_q, 1.0))))


LOSSES = {"log": log_loss, "hinge": hinge_loss}


def _check_nonempty(r_p, r_q):
    if value_of(r_p).size == 0 or value_of(r_q).size == 0:
        raise ValueError("both sample sets must be nonempty")


def ratio_loss(est: RatioEstimator, p_inputs, q_inputs, loss="log", params=None):
    return LOSSES[loss](est.logits(p_inputs, params), est.logits(q_inputs, params))


def ratio_train_step(est: RatioEstimator, p_inputs, q_inputs, loss: str, opt: AdamState, max_grad_norm=None):
    """One ADAM step on the ratio network.

    Running statistics absorb both batches before the forward pass. Returns
    ``(est, opt, loss_value, accepted)``; a non-finite loss skips the step.
    """
    if loss not in LOSSES:
        raise ValueError(f"unknown loss {loss!r}; expected one of {sorted(LOSSES)}")
    p_inputs = np.asarray(p_inputs, dtype=np.float64)
    q_inputs = np.asarray(q_inputs, dtype=np.float64)
    with np.errstate(invalid="ignore", over="ignore"):
        updated = est.with_stats(np.concatenate([p_inputs, q_inputs], axis=0))
        tape = Tape()
        params = tape.vars(updated.params)
        value = ratio_loss(updated, p_inputs, q_inputs, loss, params)
    loss_value = float(value.value)
    if not np.isfinite(loss_value):
        log.warning("ratio step skipped: non-finite loss")
        return est, opt, loss_value, False
    est = updated
    grads = grad(tape, value, params)
    if max_grad_norm is not None:
        grads = clip_by_global_norm(grads, max_grad_norm)
    opt, new_params, accepted = adam_step(opt, grads, est.params)
    return replace(est, params=new_params), opt, loss_value, accepted


def optimal_ratio_oracle(p_logpdf, q_logpdf, point):
    """Exact log p(point) - log q(point)."""
    return p_logpdf(point) - q_logpdf(point)


@dataclass(frozen=True)
class OracleRatio:
    """Drop-in for a trained estimator when the log ratio is known: ``log_ratio(inputs)`` per row."""

    log_ratio: Callable
    slots: dict
    params: dict = field(default_factory=dict)

    def logits(self, inputs, params=None):
        return self.log_ratio(inputs)

    def hash(self) -> str:
        return "oracle"
