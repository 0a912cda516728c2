"""STFT analysis/synthesis, log-magnitude features and mask helpers.

Spectrograms are plain complex arrays of shape ``(T, F)`` with
``F = window_len // 2 + 1``. Only full windows are analysed (no centering
or padding), so a waveform of length ``n`` yields
``(n - window_len) // hop + 1`` frames.
"""

from __future__ import annotations

import struct
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

LOG_FLOOR = 1e-7
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class SignalConfig:
    sample_rate: int = 8000
    window_len: int = 256
    hop: int = 64
    window_kind: str = "sine"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window_kind != "sine":
            raise ValueError(f"unsupported window kind {self.window_kind!r}")
        if self.hop <= 0 or self.window_len % self.hop != 0:
            raise ValueError("hop must divide window_len")
        if self.window_len // self.hop != 4:
            raise ValueError("window_len / hop must be 4")

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1

    def covered_range(self, n_frames: int) -> tuple[int, int]:
        """Sample range ``[lo, hi)`` that receives the full window overlap."""
        return self.window_len - self.hop, n_frames * self.hop


def sine_window(length: int) -> np.ndarray:
    n = np.arange(length)
    return np.sin(np.pi * (n + 0.5) / length)


def stft(waveform: np.ndarray, cfg: SignalConfig = SignalConfig()) -> np.ndarray:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("waveform must be 1-D")
    if len(x) < cfg.window_len:
        raise ValueError("input too short")
    n_frames = cfg.n_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_len)[:: cfg.hop][:n_frames]
    return np.fft.rfft(frames * sine_window(cfg.window_len), axis=-1)


def istft(spec: np.ndarray, cfg: SignalConfig = SignalConfig()) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    The output has ``(T - 1) * hop + window_len`` samples; only the range
    returned by :meth:`SignalConfig.covered_range` is exact, the first and
    last ``window_len - hop`` samples are attenuated.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise ValueError(
            f"spectrogram shape {spec.shape} inconsistent with {cfg.n_bins} bins"
        )
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.window_len, axis=-1) * sine_window(cfg.window_len)
    out = np.zeros((n_frames - 1) * cfg.hop + cfg.window_len)
    for t in range(n_frames):
        out[t * cfg.hop : t * cfg.hop + cfg.window_len] += frames[t]
    # sum of squared sine windows at 75% overlap is exactly 2
    return out / 2.0


def log_magnitude(spec: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    if floor <= 0:
        raise ValueError("floor must be positive")
    return np.log(np.maximum(np.abs(spec), floor))


@dataclass
class GlobalStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.mean)


_STATS_MAGIC = b"DCGS"
_STATS_VERSION = 1


def fit_global_stats(features: Iterable[np.ndarray]) -> GlobalStats:
    """Pooled per-bin mean/std over every frame of every feature matrix."""
    feats = [np.asarray(f, dtype=np.float64) for f in features]
    if not feats:
        raise ValueError("no features to fit")
    count = sum(f.shape[0] for f in feats)
    mean = sum(f.sum(axis=0) for f in feats) / count
    # second pass around the mean keeps the variance accurate
    var = sum(((f - mean) ** 2).sum(axis=0) for f in feats) / count
    return GlobalStats(mean=mean, std=np.maximum(np.sqrt(var), STD_FLOOR))


def apply_global_mvn(features: np.ndarray, stats: GlobalStats) -> np.ndarray:
    return (features - stats.mean) / stats.std


def save_global_stats(path: str | Path, stats: GlobalStats) -> None:
    n = stats.n_bins
    with open(path, "wb") as fh:
        fh.write(_STATS_MAGIC)
        fh.write(struct.pack("<II", _STATS_VERSION, n))
        fh.write(np.asarray(stats.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(stats.std, dtype="<f8").tobytes())


def load_global_stats(path: str | Path) -> GlobalStats:
    data = Path(path).read_bytes()
    if data[:4] != _STATS_MAGIC:
        raise ValueError(f"{path}: not a global-stats file")
    version, n = struct.unpack("<II", data[4:12])
    if version != _STATS_VERSION:
        raise ValueError(f"{path}: unsupported stats version {version}")
    body = np.frombuffer(data[12:], dtype="<f8")
    if body.size != 2 * n:
        raise ValueError(f"{path}: truncated stats file")
    return GlobalStats(mean=body[:n].astype(np.float64), std=body[n:].astype(np.float64))


def silence_weights(magnitudes: np.ndarray, threshold_db: float = -40.0) -> np.ndarray:
    """Binary weights: 0 for bins more than ``-threshold_db`` dB below the maximum."""
    if threshold_db >= 0:
        raise ValueError("threshold_db must be negative")
    mag = np.abs(np.asarray(magnitudes, dtype=np.float64))
    peak = mag.max() if mag.size else 0.0
    if peak <= 0:
        warnings.warn("all-zero spectrogram: every bin treated as silence", RuntimeWarning)
        return np.zeros_like(mag)
    # compare in the linear domain to avoid log(0)
    return (mag >= peak * 10.0 ** (threshold_db / 20.0)).astype(np.float64)


def apply_mask(mixture: np.ndarray, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != mixture.shape:
        raise ValueError(f"mask shape {mask.shape} does not match mixture {mixture.shape}")
    return mixture * mask


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM mono ``path``; returns samples in [-1, 1) and the rate."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: only mono files are supported")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    pcm = np.round(x * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.tobytes())
