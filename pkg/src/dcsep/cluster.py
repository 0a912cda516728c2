"""Hard and soft weighted K-means over embedding rows.

The soft variant alternates

    gamma[i, c] = softmax_c(-alpha * |v_i - mu_c|^2)
    mu[c]       = sum_i gamma[i, c] w_i v_i / sum_i gamma[i, c] w_i

and is unrolled for a fixed number of iterations so that gradients can be
propagated back to the embeddings. Initial centroids come from seeded
k-means++ and are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._accel import njit, resolve
from .nnet.layers import StaleCacheError

EMPTY_CLUSTER_MASS = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    n_clusters: int = 2
    alpha: float = 5.0
    iters: int = 5
    init: str = "kmeanspp_seeded"
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("n_clusters must be at least 2")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.iters < 1:
            raise ValueError("iters must be at least 1")
        if self.init != "kmeanspp_seeded":
            raise ValueError(f"unsupported init {self.init!r}")


@dataclass
class ClusterPosterior:
    gamma: np.ndarray  # (N, C)
    mu: np.ndarray  # (C, D)
    held: np.ndarray  # (C,) True where a cluster kept its previous centroid


def _weights(V, w):
    if w is None:
        return np.ones(V.shape[0])
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != V.shape[0]:
        raise ValueError("weights must have one entry per embedding row")
    return w


def kmeanspp_init(V, w, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ over rows with positive weight (weighted D^2 sampling)."""
    V = np.asarray(V, dtype=np.float64)
    w = _weights(V, w)
    active = np.flatnonzero(w > 0)
    if active.size < n_clusters:
        raise ValueError(f"need at least {n_clusters} embeddings with nonzero weight")
    pts, pw = V[active], w[active]
    first = rng.choice(active.size, p=pw / pw.sum())
    centers = [pts[first]]
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        score = pw * d2
        total = score.sum()
        if total <= 0:
            raise ValueError(f"fewer than {n_clusters} distinct nonzero-weight embeddings")
        idx = rng.choice(active.size, p=score / total)
        centers.append(pts[idx])
        d2 = np.minimum(d2, np.sum((pts - pts[idx]) ** 2, axis=1))
    return np.array(centers)


def _sq_dist(V, mu):
    diff = V[:, None, :] - mu[None, :, :]
    return np.einsum("ncd,ncd->nc", diff, diff), diff


def kmeans_hard(V, w, cfg: ClusterConfig, init: np.ndarray | None = None, max_iter: int = 100):
    """Weighted Lloyd iterations; returns ``(assignments, centroids)``.

    Zero-weight rows do not move centroids but are assigned to the nearest
    final centroid.
    """
    V = np.asarray(V, dtype=np.float64)
    w = _weights(V, w)
    mu = kmeanspp_init(V, w, cfg.n_clusters, np.random.default_rng(cfg.seed)) if init is None else init.copy()
    active = w > 0
    assign = None
    for _ in range(max_iter):
        new = np.argmin(_sq_dist(V, mu)[0], axis=1)
        if assign is not None and np.array_equal(new[active], assign[active]):
            assign = new
            break
        assign = new
        for c in range(cfg.n_clusters):
            sel = active & (assign == c)
            mass = w[sel].sum()
            if mass > 0:
                mu[c] = (w[sel, None] * V[sel]).sum(axis=0) / mass
    assign = np.argmin(_sq_dist(V, mu)[0], axis=1)
    return assign, mu


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _assign_numpy(V, w, mu_prev, alpha):
    d2, _ = _sq_dist(V, mu_prev)
    gamma = _softmax_rows(-alpha * d2)
    gw = gamma * w[:, None]
    return gamma, gw.T @ V, gw.sum(axis=0)


@njit(cache=True)
def _assign_numba(V, w, mu_prev, alpha):
    N, D = V.shape
    C = mu_prev.shape[0]
    gamma = np.empty((N, C))
    S = np.zeros((C, D))
    Z = np.zeros(C)
    logit = np.empty(C)
    for n in range(N):
        top = -np.inf
        for c in range(C):
            d2 = 0.0
            for d in range(D):
                diff = V[n, d] - mu_prev[c, d]
                d2 += diff * diff
            logit[c] = -alpha * d2
            if logit[c] > top:
                top = logit[c]
        total = 0.0
        for c in range(C):
            logit[c] = np.exp(logit[c] - top)
            total += logit[c]
        for c in range(C):
            g = logit[c] / total
            gamma[n, c] = g
            gw = g * w[n]
            Z[c] += gw
            for d in range(D):
                S[c, d] += gw * V[n, d]
    return gamma, S, Z


def _step_backward_numpy(V, w, mu_prev, gamma, g_gamma, g_S, g_Z, alpha, gV):
    gw = gamma * w[:, None]
    g_gamma = g_gamma + w[:, None] * (V @ g_S.T + g_Z[None, :])
    gV += gw @ g_S
    g_logit = gamma * (g_gamma - np.sum(gamma * g_gamma, axis=1, keepdims=True))
    diff = V[:, None, :] - mu_prev[None, :, :]
    g_d2 = -alpha * g_logit
    gV += 2.0 * np.einsum("nc,ncd->nd", g_d2, diff)
    return -2.0 * np.einsum("nc,ncd->cd", g_d2, diff)


@njit(cache=True)
def _step_backward_numba(V, w, mu_prev, gamma, g_gamma, g_S, g_Z, alpha, gV):
    N, D = V.shape
    C = mu_prev.shape[0]
    g_mu_prev = np.zeros((C, D))
    gg = np.empty(C)
    for n in range(N):
        dot = 0.0
        for c in range(C):
            proj = 0.0
            for d in range(D):
                proj += V[n, d] * g_S[c, d]
            gg[c] = g_gamma[n, c] + w[n] * (proj + g_Z[c])
            dot += gamma[n, c] * gg[c]
        for c in range(C):
            gw = gamma[n, c] * w[n]
            g_d2 = -alpha * gamma[n, c] * (gg[c] - dot)
            for d in range(D):
                diff = V[n, d] - mu_prev[c, d]
                gV[n, d] += gw * g_S[c, d] + 2.0 * g_d2 * diff
                g_mu_prev[c, d] -= 2.0 * g_d2 * diff
    return g_mu_prev


def soft_kmeans_step(V, w, mu_prev, alpha: float, backend: str | None = None) -> ClusterPosterior:
    """One assignment/update alternation starting from centroids ``mu_prev``."""
    V = np.ascontiguousarray(V, dtype=np.float64)
    w = np.ascontiguousarray(_weights(V, w))
    mu_prev = np.ascontiguousarray(mu_prev, dtype=np.float64)
    assign = _assign_numba if resolve(backend) == "numba" else _assign_numpy
    gamma, S, mass = assign(V, w, mu_prev, float(alpha))
    held = mass < EMPTY_CLUSTER_MASS
    mu = np.where(held[:, None], mu_prev, S / np.where(held, 1.0, mass)[:, None])
    return ClusterPosterior(gamma=gamma, mu=mu, held=held)


def soft_kmeans_unfold(V, w, cfg: ClusterConfig, init: np.ndarray | None = None,
                       backend: str | None = None):
    """Run ``cfg.iters`` soft alternations; returns ``(posterior, cache)``."""
    V = np.array(V, dtype=np.float64)
    w = _weights(V, w).copy()
    if init is None:
        mu = kmeanspp_init(V, w, cfg.n_clusters, np.random.default_rng(cfg.seed))
    else:
        mu = np.array(init, dtype=np.float64)
    steps = []
    post = None
    for _ in range(cfg.iters):
        post = soft_kmeans_step(V, w, mu, cfg.alpha, backend)
        steps.append((mu, post))
        mu = post.mu
    cache = {"V": V, "w": w, "alpha": cfg.alpha, "steps": steps, "backend": backend}
    return post, cache


def soft_kmeans_backward(grad_gamma, cache, grad_mu=None) -> np.ndarray:
    """Reverse-mode gradient of the final ``gamma`` (and optionally ``mu``) w.r.t. ``V``."""
    V, w, alpha = cache["V"], cache["w"], float(cache["alpha"])
    N, D = V.shape
    C = cache["steps"][0][1].gamma.shape[1]
    grad_gamma = np.asarray(grad_gamma, dtype=np.float64)
    if grad_gamma.shape != (N, C):
        raise StaleCacheError(f"gradient shape {grad_gamma.shape} does not match cached ({N}, {C})")
    step_backward = _step_backward_numba if resolve(cache["backend"]) == "numba" else _step_backward_numpy
    g_gamma = np.ascontiguousarray(grad_gamma)
    g_mu = np.zeros((C, D)) if grad_mu is None else np.asarray(grad_mu, dtype=np.float64).copy()
    gV = np.zeros((N, D))
    for mu_prev, post in reversed(cache["steps"]):
        held = post.held
        mass = np.where(held, 1.0, (post.gamma * w[:, None]).sum(axis=0))
        # mu_c = S_c / Z_c; held clusters pass their gradient straight to mu_prev
        g_S = np.ascontiguousarray(np.where(held[:, None], 0.0, g_mu / mass[:, None]))
        g_Z = np.where(held, 0.0, -np.sum(g_mu * post.mu, axis=1) / mass)
        g_mu_prev = step_backward(V, w, mu_prev, post.gamma, g_gamma, g_S, g_Z, alpha, gV)
        g_mu = g_mu_prev + np.where(held[:, None], g_mu, 0.0)
        # earlier gammas are not outputs; only the centroid path continues
        g_gamma = np.zeros((N, C))
    return gV
