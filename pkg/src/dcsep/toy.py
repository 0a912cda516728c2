"""Synthetic "speaker" classes for desk-scale experiments.

Each class has a distinct spectral shape and temporal texture, so a small
network can learn to tell them apart, but their spectra overlap so that
binary masks are not perfect:

* ``tone``  - harmonic complexes, f0 100-200 Hz with vibrato, harmonics below 1.2 kHz
* ``chirp`` - frequency sweeps inside 1.4-2.4 kHz
* ``noise`` - broadband noise bursts, 400-3600 Hz
* ``hiss``  - narrow-band noise bursts inside 2.6-3.8 kHz (disjoint from ``tone``)

Utterances are a sequence of syllable-like events separated by short gaps.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal import write_wav

CLASSES = ("tone", "noise", "chirp", "hiss")


def _envelope(n, fs, rng, min_on=0.15, max_on=0.5, min_gap=0.03, max_gap=0.2):
    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * fs)
    while pos < n:
        on = int(rng.uniform(min_on, max_on) * fs)
        seg = min(on, n - pos)
        ramp = np.sin(np.pi * np.arange(seg) / max(seg, 1)) ** 0.5
        env[pos : pos + seg] = ramp * rng.uniform(0.6, 1.0)
        pos += on + int(rng.uniform(min_gap, max_gap) * fs)
    return env


def _tone(n, fs, rng):
    t = np.arange(n) / fs
    f0 = rng.uniform(100.0, 200.0) * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / fs
    out = np.zeros(n)
    for k in range(1, 13):
        if k * f0.max() >= 1200.0:
            break
        out += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    return out * _envelope(n, fs, rng)


def _chirp(n, fs, rng):
    env = _envelope(n, fs, rng, 0.1, 0.35)
    out = np.zeros(n)
    # one sweep per contiguous envelope region
    edges = np.flatnonzero(np.diff(np.r_[0, (env > 0).astype(int), 0]))
    for start, stop in zip(edges[::2], edges[1::2]):
        m = stop - start
        f_a, f_b = rng.uniform(1450.0, 2350.0, size=2)
        f = np.linspace(f_a, f_b, m)
        out[start:stop] = np.sin(2 * np.pi * np.cumsum(f) / fs + rng.uniform(0, 2 * np.pi))
    return out * env


_SOS = {}


def _bandpass_bursts(n, fs, rng, order, band):
    key = (fs, order, band)
    if key not in _SOS:
        _SOS[key] = sps.butter(order, band, btype="bandpass", fs=fs, output="sos")
    return sps.sosfilt(_SOS[key], rng.standard_normal(n)) * _envelope(n, fs, rng, 0.08, 0.3, 0.05, 0.25)


def _noise(n, fs, rng):
    return _bandpass_bursts(n, fs, rng, 4, (400.0, 3600.0))


def _hiss(n, fs, rng):
    return _bandpass_bursts(n, fs, rng, 8, (2600.0, 3800.0))


_GENERATORS = {"tone": _tone, "noise": _noise, "chirp": _chirp, "hiss": _hiss}


def make_utterance(kind: str, rng: np.random.Generator, fs: int = 8000, seconds=(2.7, 3.3)) -> np.ndarray:
    n = int(rng.uniform(*seconds) * fs)
    x = _GENERATORS[kind](n, fs, rng)
    return 0.5 * x / np.max(np.abs(x))


def write_toy_index(out_dir, per_class: int, seed: int, classes=("tone", "noise"), fs: int = 8000) -> dict:
    """Write ``per_class`` WAVs per class; returns the speaker -> paths index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = {}
    for k, kind in enumerate(classes):
        rng = np.random.default_rng([seed, k])
        paths = []
        for i in range(per_class):
            p = out / f"{kind}_{i:03d}.wav"
            write_wav(p, make_utterance(kind, rng, fs), fs)
            paths.append(str(p))
        index[kind] = paths
    return index
