"""Parameter containers and the dense layers shared by every network here."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class ParamSet:
    """Ordered name -> Tensor mapping; every entry is a trainable leaf."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            cur = self._params[k]
            if tuple(v.shape) != cur.shape:
                raise ValueError(f"{k}: shape {tuple(v.shape)} != {cur.shape}")
            cur.data = np.array(v, dtype=self.dtype)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return int(np.sum([t.size for t in self._params.values()]))


def init_linear(params: ParamSet, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bound: float | None = None) -> None:
    """Register ``{prefix}.weight`` [out, in] and ``{prefix}.bias`` [out]."""
    if bound is None:
        bound = 1.0 / np.sqrt(fan_in)
    params.add(f"{prefix}.weight", rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    params.add(f"{prefix}.bias", rng.uniform(-bound, bound, size=(fan_out,)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = ops.matmul(x, ops.transpose(weight))
    return y if bias is None else ops.add(y, bias)


def init_mlp(params: ParamSet, prefix: str, widths: list[int], rng: np.random.Generator) -> None:
    for i in range(len(widths) - 1):
        init_linear(params, f"{prefix}.{i}", widths[i], widths[i + 1], rng)


def mlp(params: ParamSet, prefix: str, x: Tensor, depth: int) -> Tensor:
    """ReLU MLP with a linear last layer."""
    for i in range(depth):
        x = linear(x, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        if i < depth - 1:
            x = ops.relu(x)
    return x
