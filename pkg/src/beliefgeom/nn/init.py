from __future__ import annotations

import numpy as np

from beliefgeom.nn.tensor import Parameter


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], dtype=np.float32, name: str = "") -> Parameter:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]."""
    bound = 1.0 / np.sqrt(shape[0])
    return Parameter(rng.uniform(-bound, bound, size=shape).astype(dtype), name=name)


def zeros(shape: tuple[int, ...], dtype=np.float32, name: str = "") -> Parameter:
    return Parameter(np.zeros(shape, dtype=dtype), name=name)


def ones(shape: tuple[int, ...], dtype=np.float32, name: str = "") -> Parameter:
    return Parameter(np.ones(shape, dtype=dtype), name=name)
