"""Multi-speaker mixture corpora described by reproducible manifests.

A manifest lists, per mixture, the source files, their speaker ids and the
linear gains to apply. Gains are fixed at build time: the first source is
the reference, every other source is scaled so that its energy sits the
drawn number of dB below the reference (energies measured over the
overlap, i.e. after truncation to the shortest source). All gains of one
mixture are then scaled jointly so the mixture peaks at ``peak``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .signal import SignalConfig, read_wav

MANIFEST_MAGIC = "# dcsep-manifest v1"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Source:
    path: str
    speaker_id: str
    gain: float


@dataclass(frozen=True)
class MixtureEntry:
    mixture_id: str
    sources: tuple[Source, ...]
    target_snr_db: float

    def __post_init__(self):
        if any(s.gain <= 0 for s in self.sources):
            raise ValueError(f"{self.mixture_id}: gains must be positive")


@dataclass
class MixtureManifest:
    seed: int
    num_speakers: int
    snr_range: tuple[float, float]
    entries: list[MixtureEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be at least 2")
        if self.snr_range[0] > self.snr_range[1]:
            raise ValueError("snr_range must satisfy lo <= hi")
        for e in self.entries:
            if len(e.sources) != self.num_speakers:
                raise ValueError(f"{e.mixture_id}: expected {self.num_speakers} sources")
            if len({s.speaker_id for s in e.sources}) != self.num_speakers:
                raise ValueError(f"{e.mixture_id}: speakers must be distinct")


def resample(waveform, from_hz: int, to_hz: int) -> np.ndarray:
    """Polyphase windowed-sinc downsampling with the cutoff at 0.45 * to_hz."""
    x = np.asarray(waveform, dtype=np.float64)
    if from_hz == to_hz:
        return x.copy()
    if from_hz < to_hz or to_hz <= 0:
        raise ValueError(f"unsupported rate pair {from_hz} -> {to_hz} (downsampling only)")
    ratio = Fraction(to_hz, from_hz)
    up, down = ratio.numerator, ratio.denominator
    fs_mid = from_hz * up
    width = 0.05 * to_hz / (0.5 * fs_mid)
    numtaps, beta = sps.kaiserord(90.0, width)
    numtaps |= 1
    h = sps.firwin(numtaps, 0.45 * to_hz, window=("kaiser", beta), fs=fs_mid)
    return sps.resample_poly(x, up, down, window=h)


def load_source(path, sample_rate: int) -> np.ndarray:
    try:
        x, rate = read_wav(path)
    except (OSError, EOFError, ValueError) as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    return resample(x, rate, sample_rate)


def _truncate(waves):
    n = min(len(w) for w in waves)
    if n == 0:
        raise ValueError("sources have zero-length overlap")
    return [w[:n] for w in waves]


def build_manifest(utterance_index: dict[str, list], num_speakers: int, count: int,
                   snr_range=(0.0, 10.0), seed: int = 0, sample_rate: int = 8000,
                   peak: float = 0.9, id_prefix: str = "mix") -> MixtureManifest:
    speakers = sorted(utterance_index)
    if len(speakers) < num_speakers:
        raise ValueError(f"need {num_speakers} speakers, index has {len(speakers)}")
    lo, hi = float(snr_range[0]), float(snr_range[1])
    rng = np.random.default_rng(seed)
    audio: dict[str, np.ndarray] = {}
    entries = []
    width = max(4, len(str(count - 1)))
    for n in range(count):
        chosen = rng.choice(len(speakers), size=num_speakers, replace=False)
        picks = []
        for k in chosen:
            paths = sorted(str(p) for p in utterance_index[speakers[k]])
            picks.append((paths[rng.integers(len(paths))], speakers[k]))
        snrs = rng.uniform(lo, hi, size=num_speakers - 1)
        for p, _ in picks:
            if p not in audio:
                audio[p] = load_source(p, sample_rate)
        waves = _truncate([audio[p] for p, _ in picks])
        energy = np.array([float(np.dot(w, w)) for w in waves])
        if np.any(energy == 0):
            raise ValueError(f"zero-energy source among {[p for p, _ in picks]}")
        gains = np.empty(num_speakers)
        gains[0] = 1.0 / math.sqrt(energy[0])
        gains[1:] = np.sqrt(10.0 ** (-snrs / 10.0) / energy[1:])
        mix = sum(g * w for g, w in zip(gains, waves))
        gains *= peak / np.max(np.abs(mix))
        sources = tuple(Source(p, spk, float(g)) for (p, spk), g in zip(picks, gains))
        entries.append(MixtureEntry(f"{id_prefix}{n:0{width}d}", sources, float(snrs[0])))
    return MixtureManifest(seed=seed, num_speakers=num_speakers, snr_range=(lo, hi), entries=entries)


def render_mixture(entry: MixtureEntry, cfg: SignalConfig = SignalConfig(), base_dir=None):
    """Returns ``(mixture, references)``; references sum exactly to the mixture."""
    base = Path(base_dir) if base_dir is not None else None
    waves = []
    for s in entry.sources:
        p = Path(s.path)
        if base is not None and not p.is_absolute():
            p = base / p
        waves.append(load_source(p, cfg.sample_rate))
    refs = np.stack([s.gain * w for s, w in zip(entry.sources, _truncate(waves))])
    return refs.sum(axis=0), refs


def save_manifest(path, manifest: MixtureManifest) -> None:
    C = manifest.num_speakers
    lo, hi = manifest.snr_range
    cols = ["mixture_id", "target_snr_db"]
    for c in range(C):
        cols += [f"path_{c}", f"speaker_{c}", f"gain_{c}"]
    lines = [
        f"{MANIFEST_MAGIC}\tseed={manifest.seed}\tnum_speakers={C}\tsnr_lo={lo!r}\tsnr_hi={hi!r}",
        "\t".join(cols),
    ]
    for e in manifest.entries:
        fields = [e.mixture_id, repr(e.target_snr_db)]
        for s in e.sources:
            fields += [s.path, s.speaker_id, repr(s.gain)]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> MixtureManifest:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(MANIFEST_MAGIC):
        raise ManifestError(f"{path}:1: missing manifest header")
    try:
        header = dict(item.split("=", 1) for item in lines[0].split("\t")[1:])
        seed = int(header["seed"])
        C = int(header["num_speakers"])
        snr = (float(header["snr_lo"]), float(header["snr_hi"]))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}:1: malformed header ({exc})") from exc
    if len(lines) < 2 or not lines[1].startswith("mixture_id\t"):
        raise ManifestError(f"{path}:2: missing column header")
    entries = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 + 3 * C:
            raise ManifestError(f"{path}:{lineno}: expected {2 + 3 * C} fields, got {len(fields)}")
        try:
            sources = tuple(
                Source(fields[2 + 3 * c], fields[3 + 3 * c], float(fields[4 + 3 * c])) for c in range(C)
            )
            entries.append(MixtureEntry(fields[0], sources, float(fields[1])))
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    try:
        return MixtureManifest(seed=seed, num_speakers=C, snr_range=snr, entries=entries)
    except ValueError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
