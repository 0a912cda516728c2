"""Affinity-matching embedding objective in low-rank form.

For embeddings ``V`` (N x D), one-hot targets ``Y`` (N x C) and bin weights
``w`` the cost is ``|| U U^T - Z Z^T ||_F^2`` with ``U = diag(sqrt(w)) V`` and
``Z = diag(sqrt(w)) Y``. Expanding the norm gives

    ||U^T U||^2 - 2 ||U^T Z||^2 + ||Z^T Z||^2

which only needs D x D, D x C and C x C Gram matrices. All functions accept
extra leading batch axes (``(..., N, D)``); costs are summed over them.
"""

from __future__ import annotations

import numpy as np


def ideal_indicator(ref_mags: np.ndarray) -> np.ndarray:
    """One-hot dominant-source targets.

    ``ref_mags`` has shape ``(C, *bins)``; the result has shape ``(*bins, C)``.
    Ties go to the lowest source index.
    """
    ref_mags = np.abs(np.asarray(ref_mags))
    C = ref_mags.shape[0]
    if C < 2:
        raise ValueError("need at least two sources")
    winner = np.argmax(ref_mags, axis=0)
    return (winner[..., None] == np.arange(C)).astype(np.float64)


def _prepare(V, Y, w):
    V = np.asarray(V, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if V.shape[:-1] != Y.shape[:-1]:
        raise ValueError(f"row mismatch: V {V.shape} vs Y {Y.shape}")
    w = np.ones(V.shape[:-1]) if w is None else np.asarray(w, dtype=np.float64).reshape(V.shape[:-1])
    for name, arr in (("V", V), ("Y", Y), ("w", w)):
        if np.isnan(arr).any():
            raise ValueError(f"NaN in {name}")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    return V, Y, w


def _gram(a, b):
    return np.swapaxes(a, -1, -2) @ b


def dpcl_cost(V, Y, w=None) -> float:
    V, Y, w = _prepare(V, Y, w)
    sw = np.sqrt(w)[..., None]
    U, Z = V * sw, Y * sw
    return float(np.sum(_gram(U, U) ** 2) - 2.0 * np.sum(_gram(U, Z) ** 2) + np.sum(_gram(Z, Z) ** 2))


def dpcl_grad(V, Y, w=None) -> np.ndarray:
    """Gradient of :func:`dpcl_cost` with respect to ``V``."""
    V, Y, w = _prepare(V, Y, w)
    wv = V * w[..., None]
    return 4.0 * w[..., None] * (V @ _gram(V, wv) - Y @ _gram(Y, wv))

