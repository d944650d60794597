"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation returns a :class:`Var` that remembers its parents and a
closure that pushes the upstream gradient back to them.  :func:`backward`
linearises the graph reachable from a scalar output into a :class:`Tape`
(parents before children) and replays it in reverse once.

Also hosts the Adam optimiser and the checkpoint container used by the
planner and controller.
"""
from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = (), backward_fn: Callable | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, value={self.value!r})"

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Var":
        return Var(self.value.copy())

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self) -> "Var":
        return transpose(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def param(value, name: str | None = None) -> Var:
    """A leaf that collects gradients."""
    return Var(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents: tuple, backward_fn: Callable) -> Var:
    out = Var(value, parents=parents)
    if out.requires_grad:
        out.backward_fn = backward_fn
    else:
        out.parents = ()
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast(a.value, b.value, "add")
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast(a.value, b.value, "sub")
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, b.shape) if b.requires_grad else None))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _check_broadcast(a.value, b.value, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None))


def maximum(a, b) -> Var:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    _check_broadcast(a.value, b.value, "maximum")
    pick_a = a.value >= b.value
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def minimum(a, b) -> Var:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_var(a), as_var(b)
    _check_broadcast(a.value, b.value, "minimum")
    pick_a = a.value <= b.value
    return _node(np.where(pick_a, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def where(cond, a, b) -> Var:
    a, b = as_var(a), as_var(b)
    cond = np.asarray(cond, dtype=bool)
    return _node(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# -- elementwise unary ------------------------------------------------------

def neg(a) -> Var:
    a = as_var(a)
    return _node(-a.value, (a,), lambda g: (-g,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = as_var(a)
    if np.any(a.value <= 0):
        raise DomainError("log of non-positive value")
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Var:
    a = as_var(a)
    if np.any(a.value <= 0):
        raise DomainError("sqrt of non-positive value")
    out = np.sqrt(a.value)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return _node(av * av, (a,), lambda g: (2.0 * g * av,))


def relu(a) -> Var:
    a = as_var(a)
    on = a.value > 0
    return _node(np.where(on, a.value, 0.0), (a,), lambda g: (np.where(on, g, 0.0),))


def clip(a, lo, hi) -> Var:
    """Clamp values; gradient passes only where the input was inside the bounds."""
    a = as_var(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def pointwise(a, value: np.ndarray, local_grad: np.ndarray) -> Var:
    """Attach an externally computed function of the last axis of ``a``.

    ``value`` has shape ``a.shape[:-1]`` and ``local_grad`` has ``a.shape``;
    the chain rule is ``grad_a = upstream[..., None] * local_grad``.
    """
    a = as_var(a)
    value = np.asarray(value, dtype=DTYPE)
    local_grad = np.asarray(local_grad, dtype=DTYPE)
    if value.shape != a.shape[:-1] or local_grad.shape != a.shape:
        raise ShapeError("pointwise: value/gradient shapes do not match the input")
    return _node(value, (a,), lambda g: (g[..., None] * local_grad,))


# -- reductions and linear algebra ----------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    axes = _norm_axis(axis, a.ndim)
    return _node(a.value.sum(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axes, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return _node(a.value.mean(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axes, keepdims) / n,))


def logsumexp(a, axis=-1, keepdims: bool = False, mask=None) -> Var:
    """log(sum(exp(a))) with max-shift.

    ``mask`` (broadcastable bool) excludes entries; an all-masked slice
    yields -inf.
    """
    a = as_var(a)
    axes = _norm_axis(axis, a.ndim)
    x = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axes, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore", over="ignore"):
        e = np.exp(x - m_safe)
        s = e.sum(axis=axes, keepdims=True)
        with np.errstate(divide="ignore"):
            out_k = np.log(s) + m_safe
        weights = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
    weights = np.nan_to_num(weights, nan=0.0)
    out = out_k if keepdims else np.squeeze(out_k, axis=axes)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (gk * weights,)

    return _node(out, (a,), backward)


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul: scalar operand")
    try:
        out = av @ bv
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}") from exc

    def backward(g):
        a2 = av if av.ndim > 1 else av[None, :]
        b2 = bv if bv.ndim > 1 else bv[:, None]
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if av.ndim == 1:
                ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
            ga = _unbroadcast(ga, av.shape)
        if b.requires_grad:
            gb = np.swapaxes(a2, -1, -2) @ g2
            if bv.ndim == 1:
                gb = gb.reshape(gb.shape[:-1])
            gb = _unbroadcast(gb, bv.shape)
        return ga, gb

    return _node(out, (a, b), backward)


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape) -> Var:
    a = as_var(a)
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Var:
    a = as_var(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Var:
    a = as_var(a)
    if isinstance(idx, Var):
        raise TypeError("cannot index with a Var")

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.value[idx], (a,), backward)


def concat(items: Sequence, axis: int = 0) -> Var:
    items = [as_var(x) for x in items]
    sizes = [x.shape[axis] for x in items]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in items], axis=axis)
    return _node(out, tuple(items), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(items: Sequence, axis: int = 0) -> Var:
    items = [as_var(x) for x in items]
    out = np.stack([x.value for x in items], axis=axis)
    n = len(items)
    return _node(out, tuple(items),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def cumsum(a, axis: int = 0) -> Var:
    a = as_var(a)

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return _node(np.cumsum(a.value, axis=axis), (a,), backward)


# -- distributions -----------------------------------------------------------

def gaussian_logpdf(x, mu, sigma) -> Var:
    """Elementwise log N(x; mu, sigma^2)."""
    x, mu, sigma = as_var(x), as_var(mu), as_var(sigma)
    if np.any(sigma.value <= 0):
        raise DomainError("gaussian_logpdf requires sigma > 0")
    xv, mv, sv = x.value, mu.value, sigma.value
    z = (xv - mv) / sv
    out = -0.5 * z * z - np.log(sv) - 0.5 * LOG_2PI
    shape = out.shape

    def backward(g):
        dz = -g * z / sv
        return (_unbroadcast(np.broadcast_to(dz, shape), x.shape),
                _unbroadcast(np.broadcast_to(-dz, shape), mu.shape),
                _unbroadcast(np.broadcast_to(g * (z * z - 1.0) / sv, shape), sigma.shape))

    return _node(out, (x, mu, sigma), backward)


# -- backward pass -----------------------------------------------------------

@dataclass
class Tape:
    """Nodes reachable from an output in topological order (parents first)."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, output: Var) -> "Tape":
        order: list[Var] = []
        seen: set[int] = set()
        stack_ = [(output, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack_.append((p, False))
        return cls(order)


def backward(output: Var, wrt: Iterable[Var] | None = None):
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradients for ``wrt`` (zeros for unreachable inputs) when it
    is given, otherwise None.
    """
    if output.value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    tape = Tape.record(output)
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return None
    return [v.grad if v.grad is not None else np.zeros(v.shape, dtype=DTYPE) for v in wrt]


def grad(output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Fresh gradients of ``output`` with respect to ``wrt``."""
    for v in wrt:
        v.grad = None
    return backward(output, wrt)


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update.  Inputs are not modified."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=DTYPE)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {k!r} has shape {g.shape}, expected {p.shape}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, step)


def clip_grad_norm(grads: dict, max_norm: float) -> dict:
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# -- checkpoint container ----------------------------------------------------

MAGIC = b"STLPCKPT"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_arrays(arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> bytes:
    """Serialise named float64 arrays: magic, u32 header length, JSON header, payload."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "arrays": entries, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


class CheckpointError(ValueError):
    """Bytes that are not a readable checkpoint container."""


def load_arrays(data: bytes) -> tuple[dict, dict]:
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint container")
    try:
        (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
        start = len(MAGIC) + 4
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated checkpoint (array {e['name']!r})")
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).astype(DTYPE).reshape(e["shape"])
    return arrays, header.get("meta", {})


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    atomic_write_bytes(path, dump_arrays(arrays, meta))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return load_arrays(fh.read())
