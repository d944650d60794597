"""Boolean, hard-quantitative and smoothed semantics over discrete trajectories.

Time windows ``[t+a, t+b]`` are clamped to the last index ``T``.  A window
that is still empty after clamping (``t + a > T``) makes the value at ``t``
undefined, and asking for an undefined value raises :class:`EmptyWindowError`.

The quantitative evaluators work on whole signals: each node yields its value
at every time index at once (plus a static mask of where it is defined), so
each node is computed once per trajectory batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .. import autodiff as ad
from .ast import (And, Eventually, FalseF, Formula, Globally, Implies, Next, Not,
                  Or, Predicate, TrueF, Until)


class EmptyWindowError(ValueError):
    pass


class UnboundEvaluationError(ValueError):
    pass


class Trajectory:
    """Waypoints ``g_0 .. g_T`` in world meters, shape (T+1, 2)."""

    __slots__ = ("waypoints",)

    def __init__(self, waypoints):
        w = np.array(waypoints, dtype=float)
        if w.ndim == 1:
            # bare scalar signal: treat as x coordinates
            w = np.stack([w, np.zeros_like(w)], axis=-1)
        if w.ndim != 2 or w.shape[1] != 2 or len(w) < 1:
            raise ValueError(f"trajectory must have shape (T+1, 2), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("trajectory coordinates must be finite")
        w.flags.writeable = False
        self.waypoints = w

    @property
    def T(self) -> int:
        return len(self.waypoints) - 1

    def __len__(self):
        return len(self.waypoints)

    def __eq__(self, other):
        return isinstance(other, Trajectory) and np.array_equal(self.waypoints, other.waypoints)

    def __hash__(self):
        return hash(self.waypoints.tobytes())

    def __repr__(self):
        return f"Trajectory(T={self.T})"


@dataclass(frozen=True)
class SmoothingConfig:
    beta: float = 10.0

    def __post_init__(self):
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be finite and positive")


def _as_points(tau) -> np.ndarray:
    if isinstance(tau, Trajectory):
        return tau.waypoints
    pts = np.asarray(tau, dtype=float)
    if pts.ndim == 1:
        pts = np.stack([pts, np.zeros_like(pts)], axis=-1)
    return pts


def _binding(node: Predicate):
    if node.binding is None:
        raise UnboundEvaluationError(f"predicate {node.name!r} has no binding attached")
    return node.binding


def _check_t(t: int, T: int):
    if not (0 <= t <= T):
        raise ValueError(f"time index {t} outside [0, {T}]")


# -- Boolean semantics (pointwise recursion, used as the sign oracle) -------

def eval_bool(f: Formula, tau, t: int = 0) -> bool:
    pts = _as_points(tau)
    T = len(pts) - 1
    _check_t(t, T)
    pred_cache: dict = {}

    def pred(node, k):
        key = (node.name, k)
        if key not in pred_cache:
            pred_cache[key] = float(_binding(node).fn(pts[k], np.asarray(k))) > 0.0
        return pred_cache[key]

    def window(iv, k):
        lo, hi = k + iv.a, min(k + iv.b, T)
        if lo > T:
            raise EmptyWindowError(f"window [{iv.a},{iv.b}] empty at t={k} (T={T})")
        return range(lo, hi + 1)

    @lru_cache(maxsize=None)
    def ev(node, k):
        if isinstance(node, TrueF):
            return True
        if isinstance(node, FalseF):
            return False
        if isinstance(node, Predicate):
            return pred(node, k)
        if isinstance(node, Not):
            return not ev(node.child, k)
        if isinstance(node, And):
            l, r = ev(node.left, k), ev(node.right, k)
            return l and r
        if isinstance(node, Or):
            l, r = ev(node.left, k), ev(node.right, k)
            return l or r
        if isinstance(node, Implies):
            l, r = ev(node.left, k), ev(node.right, k)
            return (not l) or r
        if isinstance(node, Next):
            if k + 1 > T:
                raise EmptyWindowError(f"X at t={k} has no successor (T={T})")
            return ev(node.child, k + 1)
        if isinstance(node, Eventually):
            return any([ev(node.child, j) for j in window(node.interval, k)])
        if isinstance(node, Globally):
            return all([ev(node.child, j) for j in window(node.interval, k)])
        if isinstance(node, Until):
            found = False
            for j in window(node.interval, k):
                ok = ev(node.right, j) and all([ev(node.left, i) for i in range(k, j + 1)])
                found = found or ok
            return found
        raise TypeError(f"unknown node {node!r}")

    return ev(f, t)


# -- structure shared by the quantitative evaluators ------------------------

def _window_index(T: int, a: int, b: int):
    """Gather indices (T+1, W) for windows [t+a, min(t+b, T)], their validity
    mask, and which rows are non-empty."""
    t = np.arange(T + 1)[:, None]
    k = np.arange(b - a + 1)[None, :]
    raw = t + a + k
    valid = raw <= T
    idx = np.minimum(raw, T)
    nonempty = (np.arange(T + 1) + a) <= T
    return idx, valid, nonempty


def _window_defined(child_def: np.ndarray, idx, valid, nonempty) -> np.ndarray:
    return nonempty & np.all(child_def[idx] | ~valid, axis=1)


def _until_structure(T: int, a: int, b: int):
    """For each (t, t') the set of left-operand indices [t, t'] that join
    the right operand value at t'.  Returns the window pieces plus a
    (T+1, W, T+1) mask over left-operand indices."""
    idx, valid, nonempty = _window_index(T, a, b)
    tt = np.arange(T + 1)[:, None, None]
    tp = idx[:, :, None]
    tpp = np.arange(T + 1)[None, None, :]
    left_mask = (tpp >= tt) & (tpp <= tp) & valid[:, :, None]
    return idx, valid, nonempty, left_mask


def _until_defined(ldef, rdef, idx, valid, nonempty, left_mask):
    right_ok = rdef[idx] | ~valid
    left_ok = np.all(ldef[None, None, :] | ~left_mask, axis=2)
    return nonempty & np.all(right_ok & left_ok, axis=1)


# -- hard robustness ----------------------------------------------------------

def robustness_signal(f: Formula, points) -> tuple[np.ndarray, np.ndarray]:
    """Hard robustness at every time index.

    ``points`` has shape (..., T+1, 2).  Returns values (..., T+1) and a bool
    mask (T+1,) of indices where the value is defined.  Undefined entries
    hold 0.
    """
    pts = np.asarray(points, dtype=float)
    T = pts.shape[-2] - 1
    times = np.broadcast_to(np.arange(T + 1), pts.shape[:-1])
    memo: dict = {}

    def ev(node):
        if node in memo:
            return memo[node]
        out = _hard(node)
        memo[node] = out
        return out

    def _hard(node):
        shape = pts.shape[:-1]
        all_def = np.ones(T + 1, dtype=bool)
        if isinstance(node, TrueF):
            return np.full(shape, np.inf), all_def
        if isinstance(node, FalseF):
            return np.full(shape, -np.inf), all_def
        if isinstance(node, Predicate):
            return np.asarray(_binding(node).fn(pts, times), dtype=float), all_def
        if isinstance(node, Not):
            v, d = ev(node.child)
            return -v, d
        if isinstance(node, (And, Or)):
            parts = _flatten(node)
            vals = [ev(p) for p in parts]
            d = np.logical_and.reduce([x[1] for x in vals])
            stacked = np.stack([x[0] for x in vals], axis=-1)
            v = stacked.min(axis=-1) if isinstance(node, And) else stacked.max(axis=-1)
            return np.where(d, v, 0.0), d
        if isinstance(node, Implies):
            (lv, ld), (rv, rd) = ev(node.left), ev(node.right)
            d = ld & rd
            return np.where(d, np.maximum(-lv, rv), 0.0), d
        if isinstance(node, Next):
            v, d = ev(node.child)
            out = np.zeros_like(v)
            out[..., :-1] = v[..., 1:]
            nd = np.zeros(T + 1, dtype=bool)
            nd[:-1] = d[1:]
            return np.where(nd, out, 0.0), nd
        if isinstance(node, (Eventually, Globally)):
            v, d = ev(node.child)
            idx, valid, nonempty = _window_index(T, node.interval.a, node.interval.b)
            g = v[..., idx]
            if isinstance(node, Eventually):
                out = np.where(valid, g, -np.inf).max(axis=-1)
            else:
                out = np.where(valid, g, np.inf).min(axis=-1)
            nd = _window_defined(d, idx, valid, nonempty)
            return np.where(nd, out, 0.0), nd
        if isinstance(node, Until):
            (lv, ld), (rv, rd) = ev(node.left), ev(node.right)
            idx, valid, nonempty, left_mask = _until_structure(
                T, node.interval.a, node.interval.b)
            left = np.where(left_mask, lv[..., None, None, :], np.inf).min(axis=-1)
            inner = np.minimum(rv[..., idx], left)
            out = np.where(valid, inner, -np.inf).max(axis=-1)
            nd = _until_defined(ld, rd, idx, valid, nonempty, left_mask)
            return np.where(nd, out, 0.0), nd
        raise TypeError(f"unknown node {node!r}")

    return ev(f)


def robustness(f: Formula, tau, t: int = 0) -> float:
    pts = _as_points(tau)
    _check_t(t, len(pts) - 1)
    v, d = robustness_signal(f, pts)
    if not d[t]:
        raise EmptyWindowError(f"formula has an empty time window at t={t} (T={len(pts) - 1})")
    return float(v[t])


def _flatten(node) -> list:
    """Operands of a nested chain of the same associative operator."""
    kind = type(node)
    out = []
    for c in (node.left, node.right):
        if type(c) is kind:
            out.extend(_flatten(c))
        else:
            out.append(c)
    return out


# -- smoothed robustness on the autodiff tape --------------------------------

def softmin(x, beta: float, axis=-1, mask=None) -> ad.Var:
    """-(1/beta) log sum exp(-beta x)."""
    return ad.mul(ad.logsumexp(ad.mul(x, -beta), axis=axis, mask=mask), -1.0 / beta)


def softmax(x, beta: float, axis=-1, mask=None) -> ad.Var:
    return ad.mul(ad.logsumexp(ad.mul(x, beta), axis=axis, mask=mask), 1.0 / beta)


def soft_signal(f: Formula, points, beta: float, trace: list | None = None):
    """Smoothed robustness at every time index, as a Var of shape (..., T+1).

    ``points`` may be an array or a Var of shape (..., T+1, 2); gradients
    flow back to it.  When ``trace`` is a list, each aggregation appends
    ``(kind, inputs, mask, output)`` with numpy copies, where ``kind`` is
    "min" or "max" and ``inputs`` has the aggregated values on its last axis.
    """
    if not (math.isfinite(beta) and beta > 0):
        raise ValueError("beta must be finite and positive")
    pts = ad.as_var(points)
    T = pts.shape[-2] - 1
    times = np.broadcast_to(np.arange(T + 1), pts.shape[:-1])
    memo: dict = {}

    def aggregate(kind, x: ad.Var, mask=None):
        out = (softmin if kind == "min" else softmax)(x, beta, axis=-1, mask=mask)
        if trace is not None:
            m = None if mask is None else np.broadcast_to(mask, x.shape).copy()
            trace.append((kind, x.value.copy(), m, out.value.copy()))
        return out

    def clean(v: ad.Var, d: np.ndarray) -> ad.Var:
        return ad.where(d, v, 0.0)

    def ev(node):
        if node in memo:
            return memo[node]
        out = _soft(node)
        memo[node] = out
        return out

    def _soft(node):
        shape = pts.shape[:-1]
        all_def = np.ones(T + 1, dtype=bool)
        if isinstance(node, TrueF):
            return ad.Var(np.full(shape, np.inf)), all_def
        if isinstance(node, FalseF):
            return ad.Var(np.full(shape, -np.inf)), all_def
        if isinstance(node, Predicate):
            b = _binding(node)
            if b.soft_fn is None:
                raise ValueError(f"predicate {node.name!r} is not differentiable")
            return b.soft_fn(pts, times), all_def
        if isinstance(node, Not):
            v, d = ev(node.child)
            return ad.neg(v), d
        if isinstance(node, (And, Or)):
            parts = [ev(p) for p in _flatten(node)]
            d = np.logical_and.reduce([x[1] for x in parts])
            x = ad.stack([x[0] for x in parts], axis=-1)
            v = aggregate("min" if isinstance(node, And) else "max", x)
            return clean(v, d), d
        if isinstance(node, Implies):
            (lv, ld), (rv, rd) = ev(node.left), ev(node.right)
            d = ld & rd
            v = aggregate("max", ad.stack([ad.neg(lv), rv], axis=-1))
            return clean(v, d), d
        if isinstance(node, Next):
            v, d = ev(node.child)
            nxt = ad.concat([v[..., 1:], ad.Var(np.zeros(shape[:-1] + (1,)))], axis=-1)
            nd = np.zeros(T + 1, dtype=bool)
            nd[:-1] = d[1:]
            return clean(nxt, nd), nd
        if isinstance(node, (Eventually, Globally)):
            v, d = ev(node.child)
            idx, valid, nonempty = _window_index(T, node.interval.a, node.interval.b)
            g = v[..., idx]
            nd = _window_defined(d, idx, valid, nonempty)
            kind = "max" if isinstance(node, Eventually) else "min"
            mask = valid & nd[:, None]
            return clean(aggregate(kind, g, mask=mask), nd), nd
        if isinstance(node, Until):
            (lv, ld), (rv, rd) = ev(node.left), ev(node.right)
            idx, valid, nonempty, left_mask = _until_structure(
                T, node.interval.a, node.interval.b)
            nd = _until_defined(ld, rd, idx, valid, nonempty, left_mask)
            W = idx.shape[1]
            # values to take the min over: all left values (masked) plus right at t'
            left_b = ad.mul(ad.reshape(lv, lv.shape[:-1] + (1, 1, T + 1)), np.ones((T + 1, W, 1)))
            gathered = rv[..., idx]
            right_b = ad.reshape(gathered, gathered.shape + (1,))
            x = ad.concat([left_b, right_b], axis=-1)
            row_ok = (valid & nd[:, None])[:, :, None]
            inner_mask = np.concatenate([left_mask, np.ones((T + 1, W, 1), bool)], axis=-1) & row_ok
            inner = aggregate("min", x, mask=inner_mask)
            inner = ad.where(valid & nd[:, None], inner, 0.0)
            out = aggregate("max", inner, mask=valid & nd[:, None])
            return clean(out, nd), nd
        raise TypeError(f"unknown node {node!r}")

    return ev(f)


def soft_robustness(f: Formula, tau, t: int = 0, cfg: SmoothingConfig | float = SmoothingConfig(),
                    trace: list | None = None) -> ad.Var:
    """Smoothed robustness at time ``t`` as a Var (batched over leading axes
    of ``tau`` when it is an array or Var of shape (..., T+1, 2))."""
    beta = cfg.beta if isinstance(cfg, SmoothingConfig) else float(cfg)
    pts = tau if isinstance(tau, ad.Var) else ad.Var(_as_points(tau))
    T = pts.shape[-2] - 1
    _check_t(t, T)
    v, d = soft_signal(f, pts, beta, trace)
    if not d[t]:
        raise EmptyWindowError(f"formula has an empty time window at t={t} (T={T})")
    return v[..., t]
