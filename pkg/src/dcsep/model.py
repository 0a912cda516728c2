"""The full separation model: embedding network, clustering, enhancement.

Batches are dictionaries of arrays (see :func:`make_batch`)::

    feats    (B, T, F)      normalised log magnitudes of the mixture
    mix_mag  (B, T, F)      mixture amplitudes
    ref_mag  (C, B, T, F)   reference amplitudes
    Y        (B, T, F, C)   one-hot dominant-source targets
    w        (B, T, F)      bin weights; zero on silence and padding
    lengths  (B,)           valid frames per segment
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import cluster, dpcl, enhance, signal
from .nnet import checkpoint
from .nnet.layers import (
    NetworkConfig,
    ParameterSet,
    blstm_backward,
    blstm_forward,
    embedding_head,
    embedding_head_backward,
    init_blstm_params,
    init_linear_params,
    make_dropout_plan,
)

EMB = "emb."


@dataclass(frozen=True)
class ModelConfig:
    n_bins: int = 129
    embedding_dim: int = 40
    hidden_units: int = 300
    blstm_layers: int = 2
    dropout_ff: float = 0.0
    dropout_rec: float = 0.0
    enh_hidden_units: int = 300
    enh_blstm_layers: int = 2
    enh_dropout_ff: float = 0.0
    enh_dropout_rec: float = 0.0
    alpha: float = 5.0
    cluster_iters: int = 5
    silence_db: float = -40.0

    @property
    def embed_net(self) -> NetworkConfig:
        return NetworkConfig(self.blstm_layers, self.hidden_units, self.n_bins,
                             self.n_bins * self.embedding_dim, self.dropout_ff, self.dropout_rec)

    @property
    def enh_net(self) -> NetworkConfig:
        return enhance.enhance_config(self.n_bins, self.enh_hidden_units, self.enh_blstm_layers,
                                      dropout_ff=self.enh_dropout_ff, dropout_rec=self.enh_dropout_rec)

    def cluster_config(self, n_clusters: int, seed: int = 0) -> cluster.ClusterConfig:
        return cluster.ClusterConfig(n_clusters, self.alpha, self.cluster_iters, seed=seed)


def init_model_params(cfg: ModelConfig, rng: np.random.Generator, with_enhancer: bool = True) -> ParameterSet:
    params = ParameterSet()
    net = cfg.embed_net
    init_blstm_params(params, EMB, net, rng)
    init_linear_params(params, f"{EMB}out", 2 * net.hidden_units, net.output_dim, rng)
    if with_enhancer:
        enhance.init_enhance_params(cfg.enh_net, rng, params)
    return params


def embed_forward(feats, params, cfg: ModelConfig, lengths=None, rng=None, backend=None):
    """Embeddings ``(B, T, F, D)`` for features ``(B, T, F)``; dropout iff ``rng`` given."""
    feats = np.asarray(feats, dtype=np.float64)
    B, T, F = feats.shape
    net = cfg.embed_net
    plan = make_dropout_plan(net, T, B, rng) if rng is not None else None
    hid, blstm_cache = blstm_forward(feats.transpose(1, 0, 2), params, net.blstm_layers, plan,
                                     lengths, EMB, backend)
    V, head_cache = embedding_head(hid, params, cfg.n_bins, cfg.embedding_dim, f"{EMB}out")
    return V.transpose(1, 0, 2, 3), (blstm_cache, head_cache)


def embed_backward(grad_V, cache):
    blstm_cache, head_cache = cache
    g_hid, grads = embedding_head_backward(np.asarray(grad_V).transpose(1, 0, 2, 3), head_cache)
    _, g_blstm = blstm_backward(g_hid, blstm_cache)
    grads.update(g_blstm)
    return grads


def dpcl_normalizer(w) -> float:
    """Squared weight mass per segment, summed over the batch."""
    mass = np.asarray(w).reshape(len(w), -1).sum(axis=1)
    return float(np.sum(mass**2)) or 1.0


def dpcl_loss(params, batch, cfg: ModelConfig, rng=None, need_grad=True, backend=None):
    """Affinity cost summed over the batch, divided by :func:`dpcl_normalizer`."""
    V, cache = embed_forward(batch["feats"], params, cfg, batch["lengths"], rng, backend)
    B, T, F, D = V.shape
    C = batch["Y"].shape[-1]
    Vf, Yf, wf = V.reshape(B, T * F, D), batch["Y"].reshape(B, T * F, C), batch["w"].reshape(B, T * F)
    norm = dpcl_normalizer(batch["w"])
    loss = dpcl.dpcl_cost(Vf, Yf, wf) / norm
    if not need_grad:
        return loss, None
    gV = dpcl.dpcl_grad(Vf, Yf, wf).reshape(B, T, F, D) / norm
    return loss, embed_backward(gV, cache)


def _segment_seed(seed, b):
    return int(np.random.SeedSequence([int(seed), int(b)]).generate_state(1)[0])


def cluster_batch(V, w, C, cfg: ModelConfig, seed: int):
    """Soft clustering per segment; returns ``gamma (B, T, F, C)`` and caches."""
    B, T, F, D = V.shape
    gammas, caches = [], []
    for b in range(B):
        ccfg = cfg.cluster_config(C, _segment_seed(seed, b))
        post, cc = cluster.soft_kmeans_unfold(V[b].reshape(T * F, D), w[b].reshape(-1), ccfg)
        gammas.append(post.gamma.reshape(T, F, C))
        caches.append(cc)
    return np.stack(gammas), caches


def enhancement_normalizer(mix_mag) -> float:
    return float(np.sum(np.asarray(mix_mag) ** 2)) or 1.0


def signal_loss(params, batch, cfg: ModelConfig, rng=None, seed: int = 0, train_embedding=True,
                need_grad=True, dpcl_weight: float = 0.0, backend=None):
    """Permutation-minimised enhancement loss through soft clustering.

    With ``train_embedding=False`` no gradient reaches the embedding network
    (the enhancement-only stage). ``dpcl_weight`` mixes in the affinity cost.
    Returns ``(loss, grads)``.
    """
    C = batch["Y"].shape[-1]
    lengths = batch["lengths"]
    emb_rng = rng if train_embedding else None
    V, emb_cache = embed_forward(batch["feats"], params, cfg, lengths, emb_rng, backend)
    gamma, cl_caches = cluster_batch(V, batch["w"], C, cfg, seed)
    mix = batch["mix_mag"]
    shat = np.moveaxis(gamma, -1, 0) * mix
    B, T, F = mix.shape
    enh_plan = make_dropout_plan(cfg.enh_net, T, C * B, rng) if rng is not None else None
    out, enh_cache = enhance.enhance_forward(mix, shat, params, cfg.enh_net, lengths, enh_plan, backend)
    norm = enhancement_normalizer(mix)
    total, perms = enhance.enhancement_loss_batch(out.stilde, batch["ref_mag"])
    loss = total / norm
    use_dpcl = train_embedding and dpcl_weight > 0
    if use_dpcl:
        D = V.shape[-1]
        dnorm = dpcl_normalizer(batch["w"])
        Vf, Yf, wf = V.reshape(B, T * F, D), batch["Y"].reshape(B, T * F, C), batch["w"].reshape(B, T * F)
        loss += dpcl_weight * dpcl.dpcl_cost(Vf, Yf, wf) / dnorm
    if not need_grad:
        return loss, None
    g_st = enhance.enhancement_loss_grad(out.stilde, batch["ref_mag"], perms) / norm
    grads, g_shat = enhance.enhancement_backward(g_st, enh_cache)
    if not train_embedding:
        return loss, grads
    g_gamma = np.moveaxis(g_shat * mix, 0, -1)  # (B, T, F, C)
    D = V.shape[-1]
    gV = np.stack([
        cluster.soft_kmeans_backward(g_gamma[b].reshape(T * F, C), cl_caches[b]).reshape(T, F, D)
        for b in range(B)
    ])
    if use_dpcl:
        gV += dpcl_weight * dpcl.dpcl_grad(Vf, Yf, wf).reshape(B, T, F, D) / dnorm
    grads.update(embed_backward(gV, emb_cache))
    return loss, grads


def utterance_arrays(mixture, references, stats: signal.GlobalStats | None, scfg: signal.SignalConfig,
                     silence_db: float = -40.0):
    """Per-utterance training arrays, all time-major (``ref_mag`` is ``(T, C, F)``)."""
    X = signal.stft(mixture, scfg)
    mix_mag = np.abs(X)
    ref_mag = np.stack([np.abs(signal.stft(r, scfg)) for r in references])
    logmag = signal.log_magnitude(X)
    feats = signal.apply_global_mvn(logmag, stats) if stats is not None else logmag
    return {
        "feats": feats, "logmag": logmag, "mix_mag": mix_mag, "ref_mag": ref_mag.transpose(1, 0, 2),
        "Y": dpcl.ideal_indicator(ref_mag), "w": signal.silence_weights(mix_mag, silence_db),
    }


def make_batch(segments: list[dict]) -> dict:
    """Stack equal-length segments (as produced by the trainer) into a batch."""
    return {
        "feats": np.stack([s["feats"] for s in segments]),
        "mix_mag": np.stack([s["mix_mag"] for s in segments]),
        "ref_mag": np.stack([s["ref_mag"] for s in segments]).transpose(2, 0, 1, 3),
        "Y": np.stack([s["Y"] for s in segments]),
        "w": np.stack([s["w"] for s in segments]),
        "lengths": np.array([s["length"] for s in segments], dtype=np.int64),
    }


class Model:
    """Parameters, configuration and feature statistics, with inference helpers."""

    def __init__(self, cfg: ModelConfig, params: ParameterSet, stats: signal.GlobalStats,
                 scfg: signal.SignalConfig = signal.SignalConfig(), meta: dict | None = None):
        self.cfg = cfg
        self.params = params
        self.stats = stats
        self.scfg = scfg
        self.meta = dict(meta or {})

    @property
    def has_enhancer(self) -> bool:
        return f"{enhance.PREFIX}out.W" in self.params

    def save(self, path, optimizer=None, extra_meta: dict | None = None):
        config = {"model": asdict(self.cfg), "signal": asdict(self.scfg), "meta": {**self.meta, **(extra_meta or {})}}
        checkpoint.save_checkpoint(path, self.params, optimizer, config,
                                   {"stats.mean": self.stats.mean, "stats.std": self.stats.std})

    @classmethod
    def load(cls, path):
        params, optimizer, config, extra = checkpoint.load_checkpoint(path)
        model = cls(ModelConfig(**config["model"]), params,
                    signal.GlobalStats(extra["stats.mean"], extra["stats.std"]),
                    signal.SignalConfig(**config["signal"]), config.get("meta", {}))
        return model, optimizer

    def embeddings(self, waveform):
        X = signal.stft(waveform, self.scfg)
        feats = signal.apply_global_mvn(signal.log_magnitude(X), self.stats)
        V, _ = embed_forward(feats[None], self.params, self.cfg)
        return X, V[0]

    def layer_activations(self, waveform, layer: int):
        """Log-magnitude input ``(T, F)`` and BLSTM layer ``layer`` outputs ``(T, 2H)``."""
        if not 0 <= layer < self.cfg.blstm_layers:
            raise ValueError(f"layer must be in [0, {self.cfg.blstm_layers}), got {layer}")
        logmag = signal.log_magnitude(signal.stft(waveform, self.scfg))
        feats = signal.apply_global_mvn(logmag, self.stats)
        hid, _ = blstm_forward(feats, self.params, layer + 1, prefix=EMB)
        return logmag, hid

    def masks(self, waveform, n_sources: int, mode: str = "hard", alpha: float | None = None,
              seed: int = 0):
        """Per-source masks ``(C, T, F)`` and the mixture STFT."""
        if mode not in ("hard", "soft", "enhanced"):
            raise ValueError(f"unknown mode {mode!r}")
        X, V = self.embeddings(waveform)
        T, F, D = V.shape
        mag = np.abs(X)
        w = signal.silence_weights(mag, self.cfg.silence_db).reshape(-1)
        cfg = self.cfg if alpha is None else replace(self.cfg, alpha=alpha)
        ccfg = cfg.cluster_config(n_sources, seed)
        if mode == "hard":
            assign, _ = cluster.kmeans_hard(V.reshape(-1, D), w, ccfg)
            return X, np.stack([(assign == c).reshape(T, F).astype(np.float64) for c in range(n_sources)])
        post, _ = cluster.soft_kmeans_unfold(V.reshape(-1, D), w, ccfg)
        gamma = np.moveaxis(post.gamma.reshape(T, F, n_sources), -1, 0)
        if mode == "soft":
            return X, gamma
        if not self.has_enhancer:
            raise ValueError("checkpoint has no enhancement network")
        trained = self.meta.get("enh_sources")
        if trained and n_sources not in trained:
            raise ValueError(f"enhancement network was trained for C in {trained}, not {n_sources}")
        out, _ = enhance.enhance_forward(mag, gamma * mag, self.params, cfg.enh_net)
        return X, out.m

    def separate(self, waveform, n_sources: int, mode: str = "hard", alpha: float | None = None,
                 seed: int = 0):
        """Estimated source waveforms ``(C, len(waveform))``."""
        waveform = np.asarray(waveform, dtype=np.float64)
        X, masks = self.masks(waveform, n_sources, mode, alpha, seed)
        out = np.zeros((n_sources, len(waveform)))
        for c in range(n_sources):
            y = signal.istft(signal.apply_mask(X, masks[c]), self.scfg)
            n = min(len(y), len(waveform))
            out[c, :n] = y[:n]
        return out
