"""LSTM recurrence kernels.

Two interchangeable implementations of the single-direction LSTM time loop:
an explicit-loop numba kernel and a vectorised numpy fallback, selected per
call (see :mod:`dcsep._accel`).

Gate layout along the last axis is ``[input, forget, output, candidate]``.
The input projection ``x @ Wx + b`` is computed by the caller, so the kernels
only see the recurrent part.
"""

from __future__ import annotations

import numpy as np

from .._accel import HAVE_NUMBA, njit, numba_enabled, resolve as _resolve

__all__ = ["HAVE_NUMBA", "lstm_backward", "lstm_forward", "numba_enabled"]


def _sigmoid(a):
    # tanh form never overflows
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def _forward_numpy(xproj, wh, rmask):
    T, B, G = xproj.shape
    H = G // 4
    h = np.zeros((T, B, H))
    c = np.zeros((T, B, H))
    gates = np.empty((T, B, G))
    tc = np.empty((T, B, H))
    hprev = np.zeros((B, H))
    cprev = np.zeros((B, H))
    for t in range(T):
        a = xproj[t] + np.dot(hprev * rmask, wh)
        gates[t, :, : 3 * H] = _sigmoid(a[:, : 3 * H])
        gates[t, :, 3 * H :] = np.tanh(a[:, 3 * H :])
        g = gates[t]
        c[t] = g[:, H : 2 * H] * cprev + g[:, :H] * g[:, 3 * H :]
        tc[t] = np.tanh(c[t])
        h[t] = g[:, 2 * H : 3 * H] * tc[t]
        hprev = h[t]
        cprev = c[t]
    return h, c, gates, tc


def _backward_numpy(gh, gates, c, tc, h, wh, rmask):
    T, B, H = gh.shape
    da = np.empty((T, B, 4 * H))
    gwh = np.zeros((H, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, o, cand = g[:, :H], g[:, H : 2 * H], g[:, 2 * H : 3 * H], g[:, 3 * H :]
        dh = gh[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc[t] * tc[t])
        cprev = c[t - 1] if t > 0 else zeros
        da[t, :, :H] = dc * cand * i * (1.0 - i)
        da[t, :, H : 2 * H] = dc * cprev * f * (1.0 - f)
        da[t, :, 2 * H : 3 * H] = dh * tc[t] * o * (1.0 - o)
        da[t, :, 3 * H :] = dc * i * (1.0 - cand * cand)
        dc_next = dc * f
        hprev = h[t - 1] * rmask if t > 0 else zeros
        gwh += np.dot(hprev.T, da[t])
        dh_next = np.dot(da[t], wh.T) * rmask
    return da, gwh


if HAVE_NUMBA:

    @njit(cache=True)
    def _sig(x):
        # exp compiles to much faster code than scalar tanh; saturates cleanly
        return 1.0 / (1.0 + np.exp(-x))

    @njit(cache=True)
    def _forward_numba(xproj, wh, rmask):
        T, B, G = xproj.shape
        H = G // 4
        h = np.zeros((T, B, H))
        c = np.zeros((T, B, H))
        gates = np.empty((T, B, G))
        tc = np.empty((T, B, H))
        hprev = np.zeros((B, H))
        cprev = np.zeros((B, H))
        for t in range(T):
            a = xproj[t] + np.dot(hprev * rmask, wh)
            g = gates[t]
            for b in range(B):
                for j in range(3 * H):
                    g[b, j] = _sig(a[b, j])
                for j in range(3 * H, G):
                    g[b, j] = 2.0 * _sig(2.0 * a[b, j]) - 1.0
                for j in range(H):
                    cc = g[b, H + j] * cprev[b, j] + g[b, j] * g[b, 3 * H + j]
                    tcc = 2.0 * _sig(2.0 * cc) - 1.0
                    c[t, b, j] = cc
                    tc[t, b, j] = tcc
                    h[t, b, j] = g[b, 2 * H + j] * tcc
                    hprev[b, j] = h[t, b, j]
                    cprev[b, j] = cc
        return h, c, gates, tc

    @njit(cache=True)
    def _backward_numba(gh, gates, c, tc, h, wh, rmask):
        T, B, H = gh.shape
        G = 4 * H
        da = np.empty((T, B, G))
        gwh = np.zeros((H, G))
        wht = np.ascontiguousarray(wh.T)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            for b in range(B):
                for j in range(H):
                    ig = gates[t, b, j]
                    fg = gates[t, b, H + j]
                    og = gates[t, b, 2 * H + j]
                    cg = gates[t, b, 3 * H + j]
                    tcc = tc[t, b, j]
                    dh = gh[t, b, j] + dh_next[b, j]
                    dc = dc_next[b, j] + dh * og * (1.0 - tcc * tcc)
                    cp = c[t - 1, b, j] if t > 0 else 0.0
                    da[t, b, j] = dc * cg * ig * (1.0 - ig)
                    da[t, b, H + j] = dc * cp * fg * (1.0 - fg)
                    da[t, b, 2 * H + j] = dh * tcc * og * (1.0 - og)
                    da[t, b, 3 * H + j] = dc * ig * (1.0 - cg * cg)
                    dc_next[b, j] = dc * fg
            if t > 0:
                hprev = h[t - 1] * rmask
                gwh += np.dot(np.ascontiguousarray(hprev.T), da[t])
            dh_next = np.dot(da[t], wht) * rmask
        return da, gwh


def lstm_forward(xproj, wh, rmask, backend: str | None = None):
    """Run the recurrence over time-major ``xproj`` of shape ``(T, B, 4H)``.

    ``rmask`` is the ``(B, H)`` recurrent dropout mask applied to ``h[t-1]``
    before the recurrent product. Returns ``(h, c, gates, tanh_c)``.
    """
    xproj = np.ascontiguousarray(xproj, dtype=np.float64)
    wh = np.ascontiguousarray(wh, dtype=np.float64)
    rmask = np.ascontiguousarray(rmask, dtype=np.float64)
    if _resolve(backend) == "numba":
        return _forward_numba(xproj, wh, rmask)
    return _forward_numpy(xproj, wh, rmask)


def lstm_backward(gh, gates, c, tc, h, wh, rmask, backend: str | None = None):
    """Backprop through the recurrence; returns ``(d_xproj, d_wh)``."""
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (gh, gates, c, tc, h, wh, rmask)]
    if _resolve(backend) == "numba":
        return _backward_numba(*args)
    return _backward_numpy(*args)
