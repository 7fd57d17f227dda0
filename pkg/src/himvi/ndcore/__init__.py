from . import tape as ops
from .nn import (
    flatten_params,
    init_mlp,
    layer_norm,
    log1m_sigmoid,
    log_sigmoid,
    mlp_apply,
    param_hash,
    softplus,
)
from .optim import AdamState, adam_step, clip_by_global_norm
from .rng import RngStream
from .tape import ContractError, Tape, Var, grad, value_of

__all__ = [
    "AdamState",
    "ContractError",
    "RngStream",
    "Tape",
    "Var",
    "adam_step",
    "clip_by_global_norm",
    "flatten_params",
    "grad",
    "init_mlp",
    "layer_norm",
    "log1m_sigmoid",
    "log_sigmoid",
    "mlp_apply",
    "ops",
    "param_hash",
    "softplus",
    "value_of",
]
