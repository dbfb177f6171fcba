"""Parameter containers and the small layer set built on :mod:`proxytr.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def astype(self, dtype) -> Module:
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True,
                 dtype=np.float32):
        self.weight = uniform_init(rng, c_in, (c_in, c_out), dtype)
        self.bias = uniform_init(rng, c_in, (c_out,), dtype) if bias else None
        self._shape = (c_in, c_out)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self._shape[0]:
            raise DimensionError(f"Linear{self._shape}: input width {x.shape[-1]}")
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype=dtype) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x
