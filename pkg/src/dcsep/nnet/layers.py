"""BLSTM stacks, linear layers and the unit-norm embedding head.

Tensors are time-major: ``(T, B, dim)``. Sequences in a batch may have
different valid lengths; the backward-in-time direction reverses each
sequence within its own length so that trailing padding never reaches
valid frames.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the cache. A cache is tied to the parameter version
it was computed with, so backpropagating after an optimizer update raises
:class:`StaleCacheError`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

NORM_EPS = 1e-12


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    blstm_layers: int = 2
    hidden_units: int = 300
    input_dim: int = 129
    output_dim: int = 129 * 40
    dropout_ff: float = 0.0
    dropout_rec: float = 0.0

    def __post_init__(self):
        for name in ("blstm_layers", "hidden_units", "input_dim", "output_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("dropout_ff", "dropout_rec"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")


class ParameterSet(dict):
    """Named float64 tensors plus a version counter bumped on every update."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.version = 0

    def bump(self):
        self.version += 1

    def copy(self) -> ParameterSet:
        out = ParameterSet({k: v.copy() for k, v in self.items()})
        out.version = self.version
        return out


def _dirs():
    return ("fw", "bw")


def init_blstm_params(
    params: ParameterSet, prefix: str, cfg: NetworkConfig, rng: np.random.Generator, scale: float = 0.1
) -> None:
    H = cfg.hidden_units
    for layer in range(cfg.blstm_layers):
        in_dim = cfg.input_dim if layer == 0 else 2 * H
        for d in _dirs():
            name = f"{prefix}blstm{layer}.{d}"
            params[f"{name}.Wx"] = rng.uniform(-scale, scale, (in_dim, 4 * H))
            params[f"{name}.Wh"] = rng.uniform(-scale, scale, (H, 4 * H))
            b = rng.uniform(-scale, scale, 4 * H)
            b[H : 2 * H] += 1.0  # forget-gate bias
            params[f"{name}.b"] = b


def init_linear_params(
    params: ParameterSet, name: str, in_dim: int, out_dim: int, rng: np.random.Generator, scale: float = 0.1
) -> None:
    params[f"{name}.W"] = rng.uniform(-scale, scale, (in_dim, out_dim))
    params[f"{name}.b"] = rng.uniform(-scale, scale, out_dim)


def init_params(cfg: NetworkConfig, rng: np.random.Generator, prefix: str = "") -> ParameterSet:
    """BLSTM stack followed by a linear layer to ``output_dim``."""
    params = ParameterSet()
    init_blstm_params(params, prefix, cfg, rng)
    init_linear_params(params, f"{prefix}out", 2 * cfg.hidden_units, cfg.output_dim, rng)
    return params


@dataclass
class DropoutPlan:
    """Inverted-dropout masks for one batch.

    ``ff_masks[k]`` has shape ``(T, B, 2H)`` and is drawn independently per
    time step; it multiplies the output of BLSTM layer ``k``.
    ``rec_masks[k]`` has shape ``(2, B, H)``: one draw per sequence and
    direction, reused at every step and shared by all four gates.
    """

    ff_masks: list = field(default_factory=list)
    rec_masks: list = field(default_factory=list)


def _bernoulli(rng, p, shape):
    if p <= 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def make_dropout_plan(cfg: NetworkConfig, T: int, B: int, rng: np.random.Generator) -> DropoutPlan:
    H = cfg.hidden_units
    plan = DropoutPlan()
    for _ in range(cfg.blstm_layers):
        plan.ff_masks.append(_bernoulli(rng, cfg.dropout_ff, (T, B, 2 * H)))
        plan.rec_masks.append(_bernoulli(rng, cfg.dropout_rec, (2, B, H)))
    return plan


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, None, :], True
    if x.ndim != 3:
        raise ValueError("expected (T, dim) or (T, B, dim) input")
    return x, False


def _reverse_index(T, lengths):
    """Per-sequence time reversal within ``lengths``; an involution."""
    t = np.arange(T)[:, None]
    L = np.asarray(lengths)[None, :]
    return np.where(t < L, L - 1 - t, t)


def _check_lengths(lengths, T, B):
    if lengths is None:
        return np.full(B, T, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
        raise ValueError("lengths must hold one value in [1, T] per sequence")
    return lengths


def blstm_forward(features, params: ParameterSet, n_layers: int, plan: DropoutPlan | None = None,
                  lengths=None, prefix: str = "", backend: str | None = None):
    """Stacked bidirectional LSTM; returns hidden ``(T, [B,] 2H)`` and a cache."""
    x, squeeze = _as_batch(features)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in BLSTM input")
    T, B, _ = x.shape
    lengths = _check_lengths(lengths, T, B)
    rev = _reverse_index(T, lengths)
    cols = np.arange(B)[None, :]
    layers = []
    inp = x
    for k in range(n_layers):
        outs = []
        dir_caches = []
        for d_idx, d in enumerate(_dirs()):
            name = f"{prefix}blstm{k}.{d}"
            Wx, Wh, b = params[f"{name}.Wx"], params[f"{name}.Wh"], params[f"{name}.b"]
            H = Wh.shape[0]
            rmask = plan.rec_masks[k][d_idx] if plan is not None else np.ones((B, H))
            xin = inp if d == "fw" else inp[rev, cols]
            h, c, gates, tc = kernels.lstm_forward(xin @ Wx + b, Wh, rmask, backend)
            dir_caches.append((xin, h, c, gates, tc, rmask))
            outs.append(h if d == "fw" else h[rev, cols])
        hid = np.concatenate(outs, axis=-1)
        ff = plan.ff_masks[k] if plan is not None else None
        layers.append((dir_caches, ff))
        inp = hid * ff if ff is not None else hid
    cache = {
        "params": params, "version": params.version, "prefix": prefix, "n_layers": n_layers,
        "layers": layers, "rev": rev, "squeeze": squeeze, "backend": backend,
    }
    return (inp[:, 0, :] if squeeze else inp), cache


def _check_cache(cache):
    if cache["params"].version != cache["version"]:
        raise StaleCacheError("parameters changed since the forward pass")


def blstm_backward(grad_hidden, cache):
    """Backprop through the stack; returns ``(grad_features, grad_params)``."""
    _check_cache(cache)
    params, prefix = cache["params"], cache["prefix"]
    g, _ = _as_batch(grad_hidden)
    T, B, _ = g.shape
    rev = cache["rev"]
    cols = np.arange(B)[None, :]
    grads = {}
    for k in range(cache["n_layers"] - 1, -1, -1):
        dir_caches, ff = cache["layers"][k]
        if ff is not None:
            g = g * ff
        H = dir_caches[0][1].shape[-1]
        g_in = 0.0
        for d_idx, d in enumerate(_dirs()):
            name = f"{prefix}blstm{k}.{d}"
            xin, h, c, gates, tc, rmask = dir_caches[d_idx]
            gh = g[..., d_idx * H : (d_idx + 1) * H]
            if d == "bw":
                gh = gh[rev, cols]
            Wx, Wh = params[f"{name}.Wx"], params[f"{name}.Wh"]
            da, gwh = kernels.lstm_backward(gh, gates, c, tc, h, Wh, rmask, cache["backend"])
            grads[f"{name}.Wx"] = np.tensordot(xin, da, axes=([0, 1], [0, 1]))
            grads[f"{name}.Wh"] = gwh
            grads[f"{name}.b"] = da.sum(axis=(0, 1))
            gx = da @ Wx.T
            g_in = g_in + (gx if d == "fw" else gx[rev, cols])
        g = g_in
    return (g[:, 0, :] if cache["squeeze"] else g), grads


def linear_forward(x, params: ParameterSet, name: str):
    out = x @ params[f"{name}.W"] + params[f"{name}.b"]
    return out, {"params": params, "version": params.version, "name": name, "x": x}


def linear_backward(grad_out, cache):
    _check_cache(cache)
    name, x = cache["name"], cache["x"]
    W = cache["params"][f"{name}.W"]
    lead = tuple(range(grad_out.ndim - 1))
    grads = {
        f"{name}.W": np.tensordot(x, grad_out, axes=(lead, lead)),
        f"{name}.b": grad_out.sum(axis=lead),
    }
    return grad_out @ W.T, grads


def normalize_rows(u):
    """L2-normalise the last axis; returns ``(v, norms)``."""
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    return u / (norms + NORM_EPS), norms


def normalize_rows_backward(grad_v, v, norms):
    # v = u / (r + eps), r = |u|  =>  du = dv / (r + eps) - v (v . dv) / r
    proj = np.sum(v * grad_v, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return grad_v / (norms + NORM_EPS) - v * proj / safe


def embedding_head(hidden, params: ParameterSet, n_bins: int, dim: int, name: str = "out"):
    """Linear map to ``n_bins * dim`` values per frame, one unit vector per bin.

    Returns ``V`` of shape ``(..., n_bins, dim)`` and a cache.
    """
    raw, lin_cache = linear_forward(hidden, params, name)
    if raw.shape[-1] != n_bins * dim:
        raise ValueError(f"head output {raw.shape[-1]} != n_bins*dim = {n_bins * dim}")
    u = raw.reshape(raw.shape[:-1] + (n_bins, dim))
    v, norms = normalize_rows(u)
    return v, {"lin": lin_cache, "v": v, "norms": norms}


def embedding_head_backward(grad_v, cache):
    gu = normalize_rows_backward(grad_v, cache["v"], cache["norms"])
    gu = gu.reshape(gu.shape[:-2] + (-1,))
    return linear_backward(gu, cache["lin"])
