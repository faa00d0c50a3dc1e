"""LSTM cell, embedding table, MLP and Gaussian heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, ShapeError, Tensor

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float64) -> "LstmState":
        return cls(ad.Tensor(np.zeros((batch, hidden), dtype=dtype)), ad.Tensor(np.zeros((batch, hidden), dtype=dtype)))


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


class LSTMCell:
    """Single-layer LSTM; gate order in the fused matrices is (i, f, g, o)."""

    def __init__(self, store: ParameterStore, prefix: str, input_dim: int, hidden_dim: int, forget_bias: float = 1.0):
        self.prefix = prefix
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        fan_in = input_dim + hidden_dim
        self.w_x = store.uniform(f"{prefix}.w_x", (input_dim, 4 * hidden_dim), fan_in)
        self.w_h = store.uniform(f"{prefix}.w_h", (hidden_dim, 4 * hidden_dim), fan_in)
        bias = np.zeros(4 * hidden_dim)
        bias[hidden_dim : 2 * hidden_dim] = forget_bias
        self.b = store.add(f"{prefix}.b", bias)

    def initial_state(self, batch: int) -> LstmState:
        return LstmState.zeros(batch, self.hidden_dim, self.w_x.dtype)

    def step(self, x: Tensor, state: LstmState) -> LstmState:
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"{self.prefix}: expected input dim {self.input_dim}, got {x.shape[-1]}")
        if state.h.shape[-1] != self.hidden_dim:
            raise ShapeError(f"{self.prefix}: expected state dim {self.hidden_dim}, got {state.h.shape[-1]}")
        H = self.hidden_dim
        pre = ad.add(ad.add(ad.matmul(x, self.w_x), ad.matmul(state.h, self.w_h)), self.b)
        i = ad.sigmoid(pre[:, 0:H])
        f = ad.sigmoid(pre[:, H : 2 * H])
        g = ad.tanh(pre[:, 2 * H : 3 * H])
        o = ad.sigmoid(pre[:, 3 * H : 4 * H])
        c = ad.add(ad.mul(f, state.c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        return LstmState(h, c)


def lstm_step(x: Tensor, state: LstmState, cell: LSTMCell) -> LstmState:
    return cell.step(x, state)


class Embedding:
    def __init__(self, store: ParameterStore, prefix: str, vocab_size: int, dim: int):
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = store.uniform(f"{prefix}.weight", (vocab_size, dim), dim)

    def __call__(self, ids) -> Tensor:
        return ad.gather(self.weight, ids)


class Linear:
    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = store.uniform(f"{prefix}.w", (in_dim, out_dim), in_dim)
        self.b = store.zeros(f"{prefix}.b", (out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"linear: expected input dim {self.in_dim}, got {x.shape[-1]}")
        return ad.add(ad.matmul(x, self.w), self.b)


_ACTIVATIONS = {"tanh": ad.tanh, "sigmoid": ad.sigmoid, "linear": None, None: None}


class MLP:
    """Stack of affine layers.

    ``sizes`` lists layer widths including the input, e.g. ``[8, 16, 4]``.
    ``activations`` has one entry per layer; the default is tanh on hidden
    layers and a linear output.
    """

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        sizes: Sequence[int],
        activations: Optional[Sequence[Optional[str]]] = None,
    ):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least an input and an output size")
        n = len(sizes) - 1
        if activations is None:
            activations = ["tanh"] * (n - 1) + ["linear"]
        if len(activations) != n:
            raise ValueError(f"got {len(activations)} activations for {n} layers")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.layers = [Linear(store, f"{prefix}.{k}", sizes[k], sizes[k + 1]) for k in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self)


def mlp_forward(x: Tensor, mlp: MLP) -> Tensor:
    for layer, act in zip(mlp.layers, mlp.activations):
        x = layer(x)
        fn = _ACTIVATIONS[act]
        if fn is not None:
            x = fn(x)
    return x


class GaussianHead:
    """Affine maps to the mean and clamped log-variance of a diagonal Gaussian."""

    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, latent_dim: int):
        self.mean = Linear(store, f"{prefix}.mean", in_dim, latent_dim)
        self.log_var = Linear(store, f"{prefix}.log_var", in_dim, latent_dim)

    def __call__(self, h: Tensor) -> GaussianParams:
        return gaussian_head(h, self)


def gaussian_head(h: Tensor, head: GaussianHead) -> GaussianParams:
    return GaussianParams(head.mean(h), ad.clamp(head.log_var(h), LOG_VAR_MIN, LOG_VAR_MAX))


def reparameterize(p: GaussianParams, eps) -> Tensor:
    """``mean + exp(log_var / 2) * eps`` with ``eps`` held constant."""
    eps = ad.constant(np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=p.mean.dtype))
    std = ad.exp(ad.mul(p.log_var, np.asarray(0.5, dtype=p.mean.dtype)))
    return ad.add(p.mean, ad.mul(std, eps))


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ShapeError(f"kl: latent dims differ, {q.mean.shape} vs {p.mean.shape}")
    diff = ad.sub(q.mean, p.mean)
    inv_var_p = ad.exp(ad.neg(p.log_var))
    terms = ad.add(
        ad.sub(p.log_var, q.log_var),
        ad.add(ad.exp(ad.sub(q.log_var, p.log_var)), ad.mul(ad.mul(diff, diff), inv_var_p)),
    )
    return ad.mul(ad.tsum(ad.sub(terms, np.asarray(1.0, dtype=terms.dtype)), axis=-1), np.asarray(0.5, dtype=terms.dtype))


def standard_normal_params(batch: int, dim: int, dtype=np.float64) -> GaussianParams:
    z = np.zeros((batch, dim), dtype=dtype)
    return GaussianParams(ad.Tensor(z), ad.Tensor(z.copy()))


def gaussian_log_density(z: np.ndarray, mean: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """Log density of a diagonal Gaussian, summed over the last axis (numpy)."""
    return -0.5 * np.sum(np.log(2 * np.pi) + log_var + (z - mean) ** 2 * np.exp(-log_var), axis=-1)


def masked_update(new: LstmState, old: LstmState, mask: np.ndarray) -> LstmState:
    """Take ``new`` where ``mask`` is 1 and ``old`` elsewhere (row-wise)."""
    m = mask.astype(new.h.dtype)[:, None]
    keep = 1.0 - m
    return LstmState(
        ad.add(ad.mul(new.h, m), ad.mul(old.h, keep)),
        ad.add(ad.mul(new.c, m), ad.mul(old.c, keep)),
    )


__all__ = [
    "LstmState",
    "GaussianParams",
    "LSTMCell",
    "Embedding",
    "Linear",
    "MLP",
    "GaussianHead",
    "lstm_step",
    "mlp_forward",
    "gaussian_head",
    "reparameterize",
    "kl_diag_gaussian",
    "standard_normal_params",
    "gaussian_log_density",
    "masked_update",
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
]
