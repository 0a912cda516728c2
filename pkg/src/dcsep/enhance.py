"""Second-stage enhancement network and the permutation-minimised signal loss.

For every source ``c`` the per-frame concatenation ``[x, shat_c]`` of the
mixture amplitude and the clustering estimate is normalised over the
sequence and fed through one shared BLSTM + linear network giving scores
``z_c``. A softmax across sources turns the scores into masks that
partition the mixture: ``stilde_c = m_c * x``.

Arrays use the layout ``(C, B, T, F)`` for per-source quantities and
``(B, T, F)`` for the mixture; unbatched ``(C, T, F)`` / ``(T, F)`` inputs
are accepted as well.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .nnet.layers import (
    DropoutPlan,
    NetworkConfig,
    ParameterSet,
    blstm_backward,
    blstm_forward,
    init_blstm_params,
    init_linear_params,
    linear_backward,
    linear_forward,
)

PREFIX = "enh."
STD_FLOOR = 1e-8
MAX_SOURCES = 4


@dataclass
class EnhanceOutput:
    z: np.ndarray  # (C, B, T, F) scores
    m: np.ndarray  # (C, B, T, F) masks
    stilde: np.ndarray  # (C, B, T, F) estimates


def enhance_config(n_bins: int, hidden_units: int = 300, blstm_layers: int = 2, **kw) -> NetworkConfig:
    return NetworkConfig(blstm_layers=blstm_layers, hidden_units=hidden_units,
                         input_dim=2 * n_bins, output_dim=n_bins, **kw)


def init_enhance_params(cfg: NetworkConfig, rng: np.random.Generator, params: ParameterSet | None = None) -> ParameterSet:
    params = ParameterSet() if params is None else params
    init_blstm_params(params, PREFIX, cfg, rng)
    init_linear_params(params, f"{PREFIX}out", 2 * cfg.hidden_units, cfg.output_dim, rng)
    return params


def _valid_mask(B, T, lengths):
    if lengths is None:
        return np.ones((B, T))
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def sequence_mvn(u, mask):
    """Normalise ``u`` (..., B, T, dim) over valid frames of each sequence."""
    m = mask[..., None]
    count = m.sum(axis=-2, keepdims=True)
    mean = (u * m).sum(axis=-2, keepdims=True) / count
    var = (((u - mean) * m) ** 2).sum(axis=-2, keepdims=True) / count
    raw_std = np.sqrt(var)
    floored = raw_std < STD_FLOOR
    std = np.where(floored, STD_FLOOR, raw_std)
    y = (u - mean) / std * m
    return y, (y, std, floored, m, count)


def sequence_mvn_backward(gy, cache):
    y, std, floored, m, count = cache
    gy = gy * m
    g_mean = gy.sum(axis=-2, keepdims=True) / count
    g_var_term = (gy * y).sum(axis=-2, keepdims=True) / count
    g_var_term = np.where(floored, 0.0, g_var_term)
    return (gy - (g_mean + y * g_var_term) * m) / std


def softmax_masks(z, x):
    """Masks ``softmax_c(z)`` and estimates ``m * x``; the source axis is 0."""
    e = np.exp(z - z.max(axis=0, keepdims=True))
    m = e / e.sum(axis=0, keepdims=True)
    return m, m * x


def softmax_masks_backward(grad_stilde, m, x):
    """Gradient w.r.t. the scores given ``dL/dstilde``."""
    g_m = grad_stilde * x
    return m * (g_m - np.sum(m * g_m, axis=0, keepdims=True))


def _batched(x, shat):
    x = np.asarray(x, dtype=np.float64)
    shat = np.asarray(shat, dtype=np.float64)
    if x.ndim == 2:
        return x[None], shat[:, None], True
    return x, shat, False


def enhance_forward(x, shat, params: ParameterSet, cfg: NetworkConfig, lengths=None,
                    plan: DropoutPlan | None = None, backend: str | None = None):
    x, shat, squeeze = _batched(x, shat)
    C = shat.shape[0]
    if C < 2:
        raise ValueError("enhancement needs at least two sources")
    if shat.shape[1:] != x.shape:
        raise ValueError(f"estimate shape {shat.shape[1:]} does not match mixture {x.shape}")
    B, T, F = x.shape
    if cfg.input_dim != 2 * F:
        raise ValueError(f"network expects {cfg.input_dim // 2} bins, got {F}")
    mask = _valid_mask(B, T, lengths)
    u = np.concatenate([np.broadcast_to(x, shat.shape), shat], axis=-1)  # (C, B, T, 2F)
    y, mvn_cache = sequence_mvn(u, mask)
    seq = y.reshape(C * B, T, 2 * F).transpose(1, 0, 2)
    seq_len = None if lengths is None else np.tile(np.asarray(lengths), C)
    hid, blstm_cache = blstm_forward(seq, params, cfg.blstm_layers, plan, seq_len, PREFIX, backend)
    zt, lin_cache = linear_forward(hid, params, f"{PREFIX}out")
    z = zt.transpose(1, 0, 2).reshape(C, B, T, F)
    m, stilde = softmax_masks(z, x)
    out = EnhanceOutput(z=z, m=m, stilde=stilde)
    cache = {"x": x, "m": m, "mvn": mvn_cache, "blstm": blstm_cache, "lin": lin_cache,
             "shape": (C, B, T, F), "squeeze": squeeze}
    if squeeze:
        out = EnhanceOutput(z=z[:, 0], m=m[:, 0], stilde=stilde[:, 0])
    return out, cache


def enhancement_backward(grad_stilde, cache, grad_z=None):
    """Returns ``(grad_params, grad_shat)`` given ``dL/dstilde`` (and optional ``dL/dz``)."""
    C, B, T, F = cache["shape"]
    g = np.asarray(grad_stilde, dtype=np.float64).reshape(C, B, T, F)
    g_z = softmax_masks_backward(g, cache["m"], cache["x"])
    if grad_z is not None:
        g_z = g_z + np.asarray(grad_z).reshape(C, B, T, F)
    g_zt = g_z.reshape(C * B, T, F).transpose(1, 0, 2)
    g_hid, grads = linear_backward(g_zt, cache["lin"])
    g_seq, g_blstm = blstm_backward(g_hid, cache["blstm"])
    grads.update(g_blstm)
    g_y = g_seq.transpose(1, 0, 2).reshape(C, B, T, 2 * F)
    g_u = sequence_mvn_backward(g_y, cache["mvn"])
    g_shat = g_u[..., F:]
    if cache["squeeze"]:
        g_shat = g_shat[:, 0]
    return grads, g_shat


def enhancement_loss(stilde, s):
    """``min_pi sum_{c,i} (s_c - stilde_{pi(c)})^2`` for one utterance.

    Returns ``(loss, perm)`` with ``perm[c]`` the estimate index matched to
    reference ``c``. Ties resolve to the lexicographically first permutation.
    """
    stilde = np.asarray(stilde, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    C = s.shape[0]
    if stilde.shape != s.shape:
        raise ValueError("estimates and references must have the same shape")
    if C > MAX_SOURCES:
        raise ValueError(f"at most {MAX_SOURCES} sources supported")
    flat_s, flat_e = s.reshape(C, -1), stilde.reshape(C, -1)
    cost = ((flat_s[:, None, :] - flat_e[None, :, :]) ** 2).sum(axis=-1)
    return best_permutation(cost)


def best_permutation(cost: np.ndarray, maximize: bool = False):
    """Exhaustive search over assignments for a ``C x C`` pairwise score matrix."""
    C = cost.shape[0]
    best, best_perm = None, None
    for perm in itertools.permutations(range(C)):
        total = float(sum(cost[c, perm[c]] for c in range(C)))
        if best is None or (total > best if maximize else total < best):
            best, best_perm = total, perm
    return best, best_perm


def enhancement_loss_batch(stilde, s):
    """Per-sequence permutation over batch axis 1; returns ``(total, perms)``."""
    C, B = s.shape[:2]
    total = 0.0
    perms = []
    for b in range(B):
        loss, perm = enhancement_loss(stilde[:, b], s[:, b])
        total += loss
        perms.append(perm)
    return total, perms


def enhancement_loss_grad(stilde, s, perms):
    """Gradient of the batched loss w.r.t. ``stilde`` at fixed permutations."""
    g = np.zeros_like(stilde)
    for b, perm in enumerate(perms):
        for c, k in enumerate(perm):
            g[k, b] = 2.0 * (stilde[k, b] - s[c, b])
    return g


def dpcl_estimates(mix_mag, *, assignments=None, gamma=None, n_sources: int | None = None):
    """Masked mixture amplitudes from hard assignments or soft posteriors.

    ``assignments`` has one cluster index per bin (shape of ``mix_mag`` or
    flattened); ``gamma`` has a trailing source axis. Returns ``(C, *mix_mag.shape)``.
    """
    mix_mag = np.asarray(mix_mag, dtype=np.float64)
    if (assignments is None) == (gamma is None):
        raise ValueError("pass exactly one of assignments or gamma")
    if gamma is not None:
        gamma = np.asarray(gamma, dtype=np.float64)
        C = gamma.shape[-1]
        if n_sources is not None and n_sources != C:
            raise ValueError("gamma source axis does not match n_sources")
        g = gamma.reshape(mix_mag.shape + (C,))
        return np.moveaxis(g, -1, 0) * mix_mag
    if n_sources is None:
        raise ValueError("n_sources is required with hard assignments")
    a = np.asarray(assignments).reshape(mix_mag.shape)
    return np.stack([(a == c) * mix_mag for c in range(n_sources)])
