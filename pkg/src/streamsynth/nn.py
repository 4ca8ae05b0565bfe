"""Small trainable layers and an Adam optimizer on top of the tensor core."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Linear",
    "LayerNorm",
    "TransformerBlock",
    "Adam",
    "named_parameters",
    "zero_grads",
    "clone_params",
    "param_fingerprint",
]


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in: int, d_out: int, std: float = 0.02, bias: bool = True,
                 zero: bool = False):
        if zero:
            self.w = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        else:
            self.w = normal_init(rng, (d_in, d_out), std)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor, row_stable: bool = False) -> Tensor:
        out = T.matmul(x, self.w, row_stable=row_stable)
        if self.b is not None:
            out = T.add_rowvec(out, self.b)
        return out

    def parameters(self):
        return [self.w] if self.b is None else [self.w, self.b]


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def parameters(self):
        return [self.gain, self.bias]


class TransformerBlock:
    """Pre-norm single-head attention block with a silu MLP."""

    def __init__(self, rng, dim: int, mlp_ratio: int = 4, std: float = 0.02):
        self.ln1 = LayerNorm(dim)
        self.wq = Linear(rng, dim, dim, std)
        self.wk = Linear(rng, dim, dim, std)
        self.wv = Linear(rng, dim, dim, std)
        self.wo = Linear(rng, dim, dim, std)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio, std)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim, std)

    def __call__(self, x: Tensor, mask: np.ndarray, row_stable: bool = False) -> Tensor:
        h = self.ln1(x)
        att = T.masked_attention(
            self.wq(h, row_stable), self.wk(h, row_stable), self.wv(h, row_stable), mask
        )
        x = T.add(x, self.wo(att, row_stable))
        h = self.ln2(x)
        h = T.silu(self.fc1(h, row_stable))
        x = T.add(x, self.fc2(h, row_stable))
        return x

    def parameters(self):
        out = []
        for layer in (self.ln1, self.wq, self.wk, self.wv, self.wo, self.ln2, self.fc1, self.fc2):
            out.extend(layer.parameters())
        return out


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


class Ema:
    """Exponential moving average of parameters for evaluation."""

    def __init__(self, params: Sequence[Tensor], decay: float = 0.999):
        self.params = list(params)
        self.decay = decay
        self.shadow = [p.data.copy() for p in self.params]
        self.updates = 0

    def update(self) -> None:
        self.updates += 1
        d = min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))
        for s, p in zip(self.shadow, self.params):
            s *= d
            s += (1.0 - d) * p.data

    def copy_to(self, params: Sequence[Tensor] | None = None) -> None:
        for s, p in zip(self.shadow, params if params is not None else self.params):
            p.data = s.copy()


def named_parameters(model) -> list[tuple[str, Tensor]]:
    """Declaration-ordered (name, tensor) pairs from a model's parameters()."""
    return [(f"p{i}", p) for i, p in enumerate(model.parameters())]


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def clone_params(params: Sequence[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def param_fingerprint(params: Sequence[Tensor]) -> bytes:
    """Stable digest over parameter bytes; used by frozen-model contracts."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.digest()
