"""Predicate bindings: named state functions whose sign is the truth value."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import autodiff as ad


@dataclass(frozen=True)
class PredicateBinding:
    """``fn(points, t)`` maps points of shape (..., 2) and matching integer time
    indices to robustness values of shape (...).  ``soft_fn(points_var, t)`` is
    the same function on the autodiff tape; None means not differentiable.
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    soft_fn: Callable | None = None

    @property
    def differentiable(self) -> bool:
        return self.soft_fn is not None

    def __call__(self, g, t: int = 0) -> float:
        g = np.asarray(g, dtype=float)
        return float(self.fn(g, np.asarray(t)))


def region(name: str, center, radius: float) -> PredicateBinding:
    """Disc predicate, ``radius - |g - center|``: positive inside."""
    c = np.asarray(center, dtype=float)
    radius = float(radius)

    def fn(points, t):
        d = points - c
        return radius - np.hypot(d[..., 0], d[..., 1])

    def soft_fn(points, t):
        d = ad.sub(points, c)
        dist = ad.sqrt(ad.add(ad.sum(ad.square(d), axis=-1), 1e-12))
        return ad.sub(radius, dist)

    return PredicateBinding(name, fn, soft_fn)


def linear(name: str, a, b: float) -> PredicateBinding:
    """Half-plane predicate ``a . g - b``."""
    a = np.asarray(a, dtype=float)
    b = float(b)

    def fn(points, t):
        return points @ a - b

    def soft_fn(points, t):
        return ad.sub(ad.matmul(points, a), b)

    return PredicateBinding(name, fn, soft_fn)


def x_greater(name: str, c: float) -> PredicateBinding:
    return linear(name, [1.0, 0.0], c)
