"""Small MLP helpers over the autodiff engine.

Parameters live in flat ``{name: ndarray}`` dicts so they can be checkpointed
and fed to :func:`autodiff.adam_step` directly.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad


def init_mlp(rng: np.random.Generator, sizes, prefix: str, out_scale: float = 1.0) -> dict:
    """Glorot-uniform weights, zero biases; the last layer is scaled by
    ``out_scale`` so fresh policies start near a neutral output."""
    params = {}
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        if i == n - 1:
            w = w * out_scale
        params[f"{prefix}W{i}"] = w
        params[f"{prefix}b{i}"] = np.zeros(fan_out)
    return params


def n_layers(params: dict, prefix: str) -> int:
    k = 0
    while f"{prefix}W{k}" in params:
        k += 1
    return k


def mlp(params: dict, prefix: str, x, act=ad.tanh) -> ad.Var:
    """Forward through ``prefix`` layers on the tape (``params`` values may be
    Vars or arrays)."""
    h = ad.as_var(x)
    n = n_layers(params, prefix)
    for i in range(n):
        h = ad.add(ad.matmul(h, params[f"{prefix}W{i}"]), params[f"{prefix}b{i}"])
        if i < n - 1:
            h = act(h)
    return h


def mlp_np(params: dict, prefix: str, x: np.ndarray) -> np.ndarray:
    """Tape-free tanh MLP forward for acting and evaluation."""
    h = np.asarray(x, dtype=float)
    n = n_layers(params, prefix)
    for i in range(n):
        h = h @ params[f"{prefix}W{i}"] + params[f"{prefix}b{i}"]
        if i < n - 1:
            h = np.tanh(h)
    return h


def as_params(values: dict) -> dict:
    """Wrap arrays as gradient-tracking leaves."""
    return {k: ad.param(v, name=k) for k, v in values.items()}


def grads_of(params: dict) -> dict:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}


class Adam:
    """Stateful wrapper around :func:`autodiff.adam_step` with optional
    global-norm clipping."""

    def __init__(self, params: dict, lr: float, max_grad_norm: float | None = None):
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.state = ad.AdamState.zeros_like(params)

    def step(self, params: dict, grads: dict) -> dict:
        if self.max_grad_norm is not None:
            grads = ad.clip_grad_norm(grads, self.max_grad_norm)
        new, self.state = ad.adam_step(params, grads, self.state, self.lr)
        return new

    def arrays(self, prefix: str) -> dict:
        out = {f"{prefix}m/{k}": v for k, v in self.state.m.items()}
        out.update({f"{prefix}v/{k}": v for k, v in self.state.v.items()})
        out[f"{prefix}step"] = np.array(float(self.state.step))
        return out

    def load_arrays(self, arrays: dict, prefix: str) -> None:
        self.state = ad.AdamState(
            {k: arrays[f"{prefix}m/{k}"].copy() for k in self.state.m},
            {k: arrays[f"{prefix}v/{k}"].copy() for k in self.state.v},
            int(arrays[f"{prefix}step"]))
