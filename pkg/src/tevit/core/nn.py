"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from tevit.core import tensor as tt
from tevit.core.errors import ConfigError
from tevit.core.tensor import Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Module:
    """Walks attributes to find parameters; no hooks, no magic."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        seen: set[int] = set()
        out = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"checkpoint is missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, label: str = "linear"):
        self.weight = tt.parameter(xavier_uniform(rng, d_in, d_out))
        self.bias = tt.parameter(np.zeros(d_out)) if bias else None
        self._label = label

    def __call__(self, x: Tensor) -> Tensor:
        return tt.linear(x, self.weight, self.bias, label=self._label)


class LayerNorm(Module):
    def __init__(self, dim: int, epsilon: float = 1e-5):
        self.gain = tt.parameter(np.ones(dim))
        self.bias = tt.parameter(np.zeros(dim))
        self._eps = epsilon

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layer_norm(x, self.gain, self.bias, self._eps)


class MultiHeadAttention(Module):
    """Self-attention over the second-to-last axis of (..., L, C)."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, label: str = "mhsa"):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide channel dim {dim}")
        # no key bias: softmax is invariant to it, so it would be a parameter with zero gradient
        self.qkv = Linear(rng, dim, 3 * dim, bias=False, label=label)
        self.q_bias = tt.parameter(np.zeros(dim))
        self.v_bias = tt.parameter(np.zeros(dim))
        self.proj = Linear(rng, dim, dim, label=label)
        self._heads = heads
        self._label = label

    def __call__(self, x: Tensor) -> Tensor:
        *batch, length, dim = x.shape
        h = self._heads
        d = dim // h
        bias = tt.concat([self.q_bias, tt.Tensor(np.zeros(dim)), self.v_bias])
        qkv = (self.qkv(x) + bias).reshape(*batch, length, 3, h, d)
        nb = len(batch)
        # (..., 3, h, L, d)
        qkv = tt.transpose(qkv, tuple(range(nb)) + (nb + 1, nb + 2, nb, nb + 3))
        q, k, v = qkv[(Ellipsis, 0, slice(None), slice(None), slice(None))], \
            qkv[(Ellipsis, 1, slice(None), slice(None), slice(None))], \
            qkv[(Ellipsis, 2, slice(None), slice(None), slice(None))]
        scores = tt.matmul(q, tt.swapaxes(k, -1, -2), label=self._label) * (1.0 / np.sqrt(d))
        attn = tt.softmax(scores, axis=-1)
        ctx = tt.matmul(attn, v, label=self._label)  # (..., h, L, d)
        ctx = tt.swapaxes(ctx, -2, -3).reshape(*batch, length, dim)
        return self.proj(ctx)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, label: str = "ffn"):
        self.fc1 = Linear(rng, dim, hidden, label=label)
        self.fc2 = Linear(rng, hidden, dim, label=label)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tt.gelu(self.fc1(x)))
