"""Parameter construction and traversal helpers."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .tensor import Tensor


def uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def linear_weight(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """``fan_in x fan_out`` weight drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    return uniform(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in))


def linear_bias(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    return uniform(rng, (fan_out,), 1.0 / math.sqrt(fan_in))


def ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses / lists of tensors into dotted names."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix] = obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            sub = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_parameters(getattr(obj, f.name), sub))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


def count_parameters(obj) -> int:
    return sum(t.size for t in named_parameters(obj).values())
