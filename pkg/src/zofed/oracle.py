"""Exact-gradient references for tests and backprop-baseline runs.

Two independent routes: per-coordinate central finite differences, and a
hand-written chain rule for Dense / activation / GroupNorm / Flatten stacks.
The federation runtime never imports this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapabilityError, ConfigError
from .nn import (
    Activation,
    Batch,
    Dense,
    Flatten,
    GroupNorm,
    ModelSpec,
    _SELU_ALPHA,
    _SELU_SCALE,
    _group_norm,
    _layer_params,
    _values,
    activate,
    forward_losses,
)

MODES = ("fd", "analytic")


@dataclass(frozen=True)
class OracleConfig:
    step: float = 1e-5
    mode: str = "fd"
    max_params: int = 50_000

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigError("step must be > 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")


def fd_gradient(fn, w, step: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a vector (or scalar)."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    g = np.empty_like(w)
    for i in range(w.shape[0]):
        e = np.zeros_like(w)
        e[i] = step
        g[i] = (fn(w + e) - fn(w - e)) / (2.0 * step)
    return g


def exact_gradient_fd(spec: ModelSpec, params, batch: Batch, cfg: OracleConfig = OracleConfig(), chunk: int = 128) -> np.ndarray:
    w = np.asarray(_values(params), dtype=np.float64)
    n = w.shape[0]
    if n > cfg.max_params:
        raise CapabilityError(f"n={n} exceeds the finite-difference budget of {cfg.max_params} parameters")
    g = np.empty(n)
    h = cfg.step
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        m = stop - start
        rows = np.repeat(w[None, :], 2 * m, axis=0)
        idx = np.arange(m)
        rows[idx, start + idx] += h
        rows[m + idx, start + idx] -= h
        losses = forward_losses(spec, rows, batch)
        g[start:stop] = (losses[:m] - losses[m:]) / (2.0 * h)
    return g


def activation_grad(kind: str, x: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    if kind == "hardswish":
        return np.where(x < -3.0, 0.0, np.where(x > 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    if kind == "selu":
        return _SELU_SCALE * np.where(x > 0, 1.0, _SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    return np.ones_like(x)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def exact_gradient_dense(spec: ModelSpec, params, batch: Batch) -> np.ndarray:
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, (Dense, Activation, GroupNorm, Flatten)):
            raise CapabilityError(f"layer {i} ({type(layer).__name__}) has no analytic derivative; use mode='fd'")
        if isinstance(layer, GroupNorm) and len(spec.shapes[i]) != 1:
            raise CapabilityError(f"layer {i}: analytic GroupNorm supports (B, C) features only")
    w = np.asarray(_values(params), dtype=np.float64)
    lp = [{k: v[0] for k, v in d.items()} for d in _layer_params(spec, w[None, :])]
    x = np.asarray(batch.inputs, dtype=np.float64).reshape(len(batch), -1)
    y = batch.labels
    b = x.shape[0]

    cache = []
    h = x
    for i, layer in enumerate(spec.layers):
        cache.append(h)
        if isinstance(layer, Dense):
            h = h @ lp[i]["weight"]
            if layer.bias:
                h = h + lp[i]["bias"]
        elif isinstance(layer, Activation):
            h = activate(layer.kind, h)
        elif isinstance(layer, GroupNorm):
            xhat = _group_norm(h, layer.groups, layer.eps, axis=1)
            cache[-1] = (h, xhat)
            h = xhat * lp[i]["scale"] + lp[i]["shift"]

    grad = np.zeros_like(w)
    slots = {(s.layer, s.name): s for s in spec.layout}
    # d(mean CE)/d(logits) = (softmax - onehot) / B
    dh = _softmax(h)
    dh[np.arange(b), y] -= 1.0
    dh /= b
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, Dense):
            inp = cache[i]
            s = slots[(i, "weight")]
            grad[s.offset : s.offset + s.length] = (inp.T @ dh).ravel()
            if layer.bias:
                s = slots[(i, "bias")]
                grad[s.offset : s.offset + s.length] = dh.sum(axis=0)
            dh = dh @ lp[i]["weight"].T
        elif isinstance(layer, Activation):
            dh = dh * activation_grad(layer.kind, cache[i])
        elif isinstance(layer, GroupNorm):
            inp, xhat = cache[i]
            s = slots[(i, "scale")]
            grad[s.offset : s.offset + s.length] = (dh * xhat).sum(axis=0)
            s = slots[(i, "shift")]
            grad[s.offset : s.offset + s.length] = dh.sum(axis=0)
            dxhat = dh * lp[i]["scale"]
            dh = _group_norm_backward(inp, xhat, dxhat, layer.groups, layer.eps)
    return grad


def _group_norm_backward(x, xhat, dxhat, groups, eps):
    b, c = x.shape
    m = c // groups
    xg = x.reshape(b, groups, m)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    dg = dxhat.reshape(b, groups, m)
    xh = xhat.reshape(b, groups, m)
    dx = inv_std * (dg - dg.mean(axis=2, keepdims=True) - xh * (dg * xh).mean(axis=2, keepdims=True))
    return dx.reshape(b, c)


def exact_gradient(spec: ModelSpec, params, batch: Batch, cfg: OracleConfig = OracleConfig()) -> np.ndarray:
    """Analytic gradient when requested and supported, otherwise finite differences."""
    if cfg.mode == "analytic":
        try:
            return exact_gradient_dense(spec, params, batch)
        except CapabilityError:
            pass
    return exact_gradient_fd(spec, params, batch, cfg)
