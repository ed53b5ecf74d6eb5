"""Parameter containers on top of :mod:`ratcap.numerics`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


class Module:
    """Registers :class:`Parameter` and child :class:`Module` attributes in order."""

    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        setattr(self, name, module)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = Parameter(init_uniform(rng, d_in, (d_in, d_out)))
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class AttentionWeights(Module):
    """Query/key/value/output projections of one attention block.

    ``with_query=False`` builds a key/value/output-only block whose queries
    come from elsewhere (the memory branch of the kNN-augmented layer).
    """

    def __init__(self, d: int, rng: np.random.Generator, with_query: bool = True):
        super().__init__()
        self.with_query = with_query
        if with_query:
            self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    # attribute view used by numerics.multi_head_attention
    @property
    def wq(self):
        return self.q.w

    @property
    def bq(self):
        return self.q.b

    @property
    def wk(self):
        return self.k.w

    @property
    def bk(self):
        return self.k.b

    @property
    def wv(self):
        return self.v.w

    @property
    def bv(self):
        return self.v.b

    @property
    def wo(self):
        return self.o.w

    @property
    def bo(self):
        return self.o.b


class FeedForward(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(d, d * mult, rng)
        self.fc2 = Linear(d * mult, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nx.relu(self.fc1(x)))


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Standard sine/cosine position table ``[n, d]``."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table
