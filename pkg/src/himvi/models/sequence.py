"""Arithmetic-expression grammar and a noise-injected recurrent generator.

Grammar: S -> x | S+S | S-S | S*S | S/S.

Generator, for t = 1..T:
    z_t = g_z(x_{t-1}, z_{t-1}, eps_z)     affine -> layer norm -> relu
    x_t = argmax g_x(z_t, eps_x)           affine token scores
with noise concatenated into the inputs of both maps, x_0 a start token and
z_0 = 0. Token scores tie-break to the lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..ndcore import init_mlp, mlp_apply, ops, value_of
from ..ndcore.nn import LAYER_NORM_FLOOR
from .base import HimModel, normal_logpdf
from .gan import _Layout

SYMBOLS = ("x", "+", "-", "*", "/")
OPERATORS = SYMBOLS[1:]
END = len(SYMBOLS)          # end marker, also used as padding
START = len(SYMBOLS) + 1    # input-only start token
N_OUT = len(SYMBOLS) + 1
N_IN = len(SYMBOLS) + 2


def cfg_sample(rng, max_len: int = 15, max_attempts: int = 1000) -> str:
    """Expand S with uniformly chosen productions; reject derivations longer than max_len."""
    for _ in range(max_attempts):
        out = _expand(rng, max_len)
        if out is not None:
            return out
    return "x"


def _expand(rng, max_len):
    # leftmost derivation on a symbol stack; abort as soon as the sentential form is too long
    stack, out = ["S"], []
    while stack:
        sym = stack.pop()
        if sym != "S":
            out.append(sym)
            continue
        choice = int(rng.integers(len(SYMBOLS)))
        if choice == 0:
            out.append("x")
        else:
            stack.extend(["S", SYMBOLS[choice], "S"])
        if len(out) + len(stack) > max_len:
            return None
    return "".join(out)


def cfg_valid(sequence: str, max_len: int = 15) -> bool:
    """True iff ``sequence`` is derivable from S and has at most ``max_len`` symbols.

    Every derivation yields x (op x)*, and every such string is derivable.
    """
    if not sequence or len(sequence) > max_len:
        return False
    return _alternates(sequence)


@lru_cache(maxsize=65536)
def _alternates(s: str) -> bool:
    if len(s) % 2 == 0:
        return False
    for i, ch in enumerate(s):
        if i % 2 == 0 and ch != "x":
            return False
        if i % 2 == 1 and ch not in OPERATORS:
            return False
    return True


def encode(sequence: str, max_len: int = 15) -> np.ndarray:
    """Token ids padded with END to ``max_len``."""
    if len(sequence) > max_len:
        raise ValueError("sequence longer than max_len")
    ids = [SYMBOLS.index(c) for c in sequence] + [END] * (max_len - len(sequence))
    return np.array(ids, dtype=np.int64)


def decode(ids) -> str:
    out = []
    for i in np.asarray(ids).ravel():
        if int(i) == END:
            break
        out.append(SYMBOLS[int(i)])
    return "".join(out)


def one_hot(ids, n=N_OUT) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    return np.eye(n)[ids]


@dataclass
class StochasticRnnModel(HimModel):
    hidden_dim: int = 16
    noise_z: int = 4
    noise_x: int = 4
    max_len: int = 15

    name = "stochastic-rnn"
    flat_prior = False

    def __post_init__(self):
        H = self.hidden_dim
        self.layout = _Layout(
            {
                "z.W0": (N_IN + H + self.noise_z, H),
                "z.b0": (H,),
                "z.g0": (H,),
                "z.s0": (H,),
                "x.W0": (H + self.noise_x, N_OUT),
                "x.b0": (N_OUT,),
            }
        )
        self.global_dim = self.layout.size
        self.data_dim = self.max_len * N_OUT
        self.local_dim = self.max_len * H
        self.noise_dim = self.max_len * (self.noise_z + self.noise_x)

    # -- parameters

    def split(self, theta):
        p = self.layout.unflatten(theta)
        gz = {k[2:]: v for k, v in p.items() if k.startswith("z.")}
        gx = {k[2:]: v for k, v in p.items() if k.startswith("x.")}
        return gz, gx

    def init_params(self, rng, init="scaled") -> np.ndarray:
        H = self.hidden_dim
        gz = init_mlp(rng, [N_IN + H + self.noise_z, H], init=init, layer_norm=True, normalize_output=True)
        gx = init_mlp(rng, [H + self.noise_x, N_OUT], init=init)
        return self.layout.flatten({**{"z." + k: v for k, v in gz.items()}, **{"x." + k: v for k, v in gx.items()}})

    def init_global(self, rng, init="scaled"):
        return self.init_params(rng, init)

    def prior_logpdf(self, beta):
        return normal_logpdf(beta, 0.0, 1.0)

    def prior_sample(self, rng, size=None):
        shape = (self.global_dim,) if size is None else (size, self.global_dim)
        return rng.normal(size=shape)

    # -- generation

    def _run(self, theta, eps):
        """Generate ``(ids, z)`` for noise ``eps`` of shape (m, T, noise_z + noise_x).

        ``theta`` is one parameter vector or one row per sequence.
        """
        theta = np.asarray(theta, dtype=np.float64)
        p = self.layout.unflatten(theta)
        m, T = eps.shape[0], eps.shape[1]
        if theta.ndim == 1:
            def affine(h, w, b):
                return h @ p[w] + p[b]
        else:
            def affine(h, w, b):
                return np.einsum("mi,mio->mo", h, p[w]) + p[b]
        H = self.hidden_dim
        z = np.zeros((m, H))
        prev = np.full(m, START)
        ids = np.empty((m, T), dtype=np.int64)
        zs = np.empty((m, T, H))
        for t in range(T):
            ez, ex = eps[:, t, : self.noise_z], eps[:, t, self.noise_z :]
            h = affine(np.concatenate([one_hot(prev, N_IN), z, ez], axis=1), "z.W0", "z.b0")
            c = h - h.mean(axis=1, keepdims=True)
            h = c / np.sqrt((c * c).mean(axis=1, keepdims=True) + LAYER_NORM_FLOOR) * p["z.g0"] + p["z.s0"]
            z = np.maximum(h, 0.0)
            scores = affine(np.concatenate([z, ex], axis=1), "x.W0", "x.b0")
            tok = np.argmax(scores, axis=1)
            ids[:, t], zs[:, t] = tok, z
            prev = tok
        return ids, zs

    def simulate(self, beta, covariates, rng):
        beta = np.atleast_2d(beta)
        m = beta.shape[0] if covariates is None else len(covariates)
        eps = rng.normal(size=(m, self.max_len, self.noise_z + self.noise_x))
        uniq = np.unique(beta, axis=0)
        theta = uniq[0] if len(uniq) == 1 else np.broadcast_to(beta, (m, self.global_dim))
        ids, zs = self._run(theta, eps)
        return self.rows_from_ids(ids), zs.reshape(m, -1)

    def rows_from_ids(self, ids):
        ids = np.array(ids, dtype=np.int64)
        # everything after the first end marker becomes padding
        ended = np.cumsum(ids == END, axis=1) > 0
        ids[ended] = END
        return one_hot(ids).reshape(len(ids), -1)

    def ids_from_rows(self, rows):
        return np.asarray(rows).reshape(len(rows), self.max_len, N_OUT).argmax(axis=2)

    # -- ratio features: noise-free one-step predictions along the given trajectory

    @property
    def global_feature_dim(self):
        return self.max_len * (self.hidden_dim + N_OUT)

    def global_features(self, beta, x, z):
        bv = value_of(beta)
        if bv.ndim == 2:
            uniq = np.unique(bv, axis=0)
            if len(uniq) == 1:
                return self.global_features(uniq[0], x, z)
            return self._row_features(bv, np.asarray(value_of(x)), np.asarray(value_of(z)))
        gz, gx = self.split(beta)
        xv = np.asarray(value_of(x))
        m, T, H = len(xv), self.max_len, self.hidden_dim
        ids = xv.reshape(m, T, N_OUT).argmax(axis=2)
        prev_ids = np.concatenate([np.full((m, 1), START), ids[:, :-1]], axis=1)
        prev_tok = one_hot(prev_ids, N_IN)                                   # (m, T, N_IN)
        z3 = ops.reshape(z, (m, T, H))
        z_prev = ops.concat([np.zeros((m, 1, H)), ops.getitem(z3, (slice(None), slice(0, T - 1)))], axis=1)
        inp_z = ops.concat([prev_tok, z_prev, np.zeros((m, T, self.noise_z))], axis=2)
        z_hat = mlp_apply(gz, ops.reshape(inp_z, (m * T, -1)), normalize="layer_norm", activate_output=True)
        inp_x = ops.concat([ops.reshape(z, (m * T, H)), np.zeros((m * T, self.noise_x))], axis=1)
        s_hat = mlp_apply(gx, inp_x)
        feats = ops.concat([ops.reshape(z_hat, (m, T, H)), ops.reshape(s_hat, (m, T, N_OUT))], axis=2)
        return ops.reshape(feats, (m, -1))

    def _row_features(self, thetas, x, z):
        """``global_features`` with a different parameter vector per row (plain arrays)."""
        p = self.layout.unflatten(thetas)
        m, T, H = len(x), self.max_len, self.hidden_dim
        ids = x.reshape(m, T, N_OUT).argmax(axis=2)
        prev_ids = np.concatenate([np.full((m, 1), START), ids[:, :-1]], axis=1)
        z3 = z.reshape(m, T, H)
        z_prev = np.concatenate([np.zeros((m, 1, H)), z3[:, :-1]], axis=1)
        inp_z = np.concatenate([one_hot(prev_ids, N_IN), z_prev, np.zeros((m, T, self.noise_z))], axis=2)
        h = np.einsum("mti,mio->mto", inp_z, p["z.W0"]) + p["z.b0"][:, None]
        c = h - h.mean(axis=2, keepdims=True)
        h = c / np.sqrt((c * c).mean(axis=2, keepdims=True) + LAYER_NORM_FLOOR) * p["z.g0"][:, None] + p["z.s0"][:, None]
        z_hat = np.maximum(h, 0.0)
        inp_x = np.concatenate([z3, np.zeros((m, T, self.noise_x))], axis=2)
        s_hat = np.einsum("mti,mio->mto", inp_x, p["x.W0"]) + p["x.b0"][:, None]
        return np.concatenate([z_hat, s_hat], axis=2).reshape(m, -1)


def rnn_generate(model: StochasticRnnModel, params, rng, length=None) -> list:
    """One token sequence (ids, END included) of ``length`` steps."""
    length = model.max_len if length is None else length
    if length > model.max_len:
        raise ValueError("length exceeds max_len")
    theta = model.layout.flatten(params) if isinstance(params, dict) else params
    eps = rng.normal(size=(1, length, model.noise_z + model.noise_x))
    ids, _ = model._run(theta, eps)
    return [int(i) for i in ids[0]]


def validity_rate(model: StochasticRnnModel, theta, rng, n=500) -> float:
    eps = rng.normal(size=(n, model.max_len, model.noise_z + model.noise_x))
    ids, _ = model._run(theta, eps)
    return float(np.mean([cfg_valid(decode(row), model.max_len) for row in ids]))
