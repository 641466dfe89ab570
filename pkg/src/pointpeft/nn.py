"""Parameters, modules and a handful of layers on top of ``tensor``."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A named tensor with a trainable flag.

    ``requires_grad`` mirrors ``trainable`` so frozen parameters never enter
    the tape.
    """

    __slots__ = ("name",)

    def __init__(self, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = ""

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)


class Module:
    """Attribute-registered container of parameters and child modules.

    ``named_parameters`` walks attributes in definition order; a parameter
    reachable along several paths is reported once, under the first path.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix, seen):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                if id(val) not in seen:
                    seen.add(id(val))
                    if not val.name:
                        val.name = path
                    yield path, val
            elif isinstance(val, Module):
                if id(val) not in seen:
                    seen.add(id(val))
                    yield from val._walk(path + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module) and id(item) not in seen:
                        seen.add(id(item))
                        yield from item._walk(f"{path}.{i}.", seen)
                    elif isinstance(item, Parameter) and id(item) not in seen:
                        seen.add(id(item))
                        if not item.name:
                            item.name = f"{path}.{i}"
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for name, arr in state.items():
            p = params.get(name)
            if p is None:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise T.ShapeError("load_state_dict", p.shape, arr.shape, name)
            p.data = arr.astype(p.dtype, copy=True)

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.trainable = True


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out), dtype) if zero else xavier(rng, d_in, d_out, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.weight = Parameter(np.ones(dim, dtype))
        self.bias = Parameter(np.zeros(dim, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class Bottleneck(Module):
    """d_in -> hidden -> d_out MLP with GELU; optionally residual.

    With ``zero_up`` the up-projection starts at zero, so a residual
    bottleneck starts as the identity and a plain one starts at zero.
    """

    def __init__(self, dim, hidden, rng, dtype=np.float32, residual=True, zero_up=False, d_out=None):
        d_out = dim if d_out is None else d_out
        if residual and d_out != dim:
            raise ValueError("residual bottleneck needs d_out == dim")
        self.down = Linear(dim, hidden, rng, dtype)
        self.up = Linear(hidden, d_out, rng, dtype, zero=zero_up)
        self._residual = residual

    def __call__(self, x: Tensor) -> Tensor:
        y = self.up(T.gelu(self.down(x)))
        return T.add(x, y) if self._residual else y


def count(params) -> int:
    return int(np.sum([p.data.size for p in params], dtype=np.int64)) if params else 0
