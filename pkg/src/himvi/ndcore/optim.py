from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)
    rejected: int = 0


def adam_step(state: AdamState, grads: Mapping, params: Mapping):
    """One bias-corrected ADAM descent step.

    Returns ``(new_state, new_params, accepted)``. A step whose gradients
    contain a non-finite entry is rejected: params and moments are returned
    unchanged, ``rejected`` is incremented and a warning is logged.
    """
    if set(grads) != set(params):
        raise ValueError("grads and params must have the same keys")
    for k in params:
        if np.shape(grads[k]) != np.shape(params[k]):
            raise ValueError(f"shape mismatch for {k}: {np.shape(grads[k])} vs {np.shape(params[k])}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("adam: non-finite gradient at step %d, step rejected", state.step_count + 1)
        return replace(state, rejected=state.rejected + 1), dict(params), False

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m, v, out = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m_prev = state.m.get(k, np.zeros_like(g))
        v_prev = state.v.get(k, np.zeros_like(g))
        m[k] = b1 * m_prev + (1 - b1) * g
        v[k] = b2 * v_prev + (1 - b2) * g * g
        m_hat = m[k] / (1 - b1**t)
        v_hat = v[k] / (1 - b2**t)
        out[k] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return replace(state, step_count=t, m=m, v=v), out, True


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if not np.isfinite(total) or total <= max_norm:
        return dict(grads)
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}
