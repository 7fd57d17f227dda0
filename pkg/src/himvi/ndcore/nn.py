"""Multilayer perceptrons and stable scalar transforms on the tape."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from . import tape as T
from .tape import ContractError, value_of

LAYER_NORM_FLOOR = 1e-5


def softplus(x):
    """log(1 + e^x) without overflow."""
    return np.logaddexp(0.0, x)


def log_sigmoid(x):
    return -softplus(-np.asarray(x, dtype=np.float64))


def log1m_sigmoid(x):
    """log(1 - sigmoid(x))."""
    return -softplus(x)


def n_layers(params: Mapping) -> int:
    n = 0
    while f"W{n}" in params:
        n += 1
    return n


def init_mlp(rng, sizes, *, init="scaled", layer_norm=False, normalize_output=False) -> dict[str, np.ndarray]:
    """Parameters for an MLP with layer widths ``sizes`` (input first).

    ``init="scaled"`` draws weights from N(0, 1/fan_in) with zero biases;
    ``init="standard"`` draws every weight and bias from N(0, 1).
    Layer-norm gains start at 1 and shifts at 0 in both modes.
    """
    if init not in ("scaled", "standard"):
        raise ValueError(f"unknown init mode {init!r}")
    params = {}
    n = len(sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(size=(fan_in, fan_out))
        if init == "scaled":
            params[f"W{i}"] = w / np.sqrt(fan_in)
            params[f"b{i}"] = np.zeros(fan_out)
        else:
            params[f"W{i}"] = w
            params[f"b{i}"] = rng.normal(size=fan_out)
        if layer_norm and (i < n - 1 or normalize_output):
            params[f"g{i}"] = np.ones(fan_out)
            params[f"s{i}"] = np.zeros(fan_out)
    return params


def layer_norm(h, gain, shift, floor=LAYER_NORM_FLOOR):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    centered = T.sub(h, T.mean(h, axis=-1, keepdims=True))
    var = T.mean(T.square(centered), axis=-1, keepdims=True)
    inv_std = T.exp(T.mul(T.log(T.add(var, floor)), -0.5))
    return T.add(T.mul(T.mul(centered, inv_std), gain), shift)


def mlp_apply(params: Mapping, x, activation="relu", normalize="none", activate_output=False):
    """Forward pass. Hidden layers are affine -> [layer norm] -> activation.

    The last layer is affine only unless ``activate_output`` is set, in which
    case it is treated like a hidden layer. Works on Vars and on plain arrays.
    """
    if activation != "relu":
        raise ContractError(f"unsupported activation {activation!r}")
    if normalize not in ("none", "layer_norm"):
        raise ContractError(f"unsupported normalization {normalize!r}")
    L = n_layers(params)
    if L == 0:
        raise ContractError("no layers in params")
    h = x
    for i in range(L):
        W, b = params[f"W{i}"], params[f"b{i}"]
        wshape = value_of(W).shape
        if value_of(h).shape[-1] != wshape[0] or value_of(b).shape != (wshape[1],):
            raise ContractError(
                f"layer {i}: input width {value_of(h).shape[-1]} vs weight {wshape}, bias {value_of(b).shape}"
            )
        h = T.add(T.matmul(h, W), b)
        if i < L - 1 or activate_output:
            if normalize == "layer_norm" and f"g{i}" in params:
                h = layer_norm(h, params[f"g{i}"], params[f"s{i}"])
            h = T.relu(h)
    return h


def flatten_params(params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def param_hash(params: Mapping[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()
