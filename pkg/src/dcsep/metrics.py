"""Separation metrics and oracle masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dpcl import ideal_indicator
from .enhance import best_permutation
from .signal import SignalConfig, stft

DB_CAP = 100.0

REPORT_COLUMNS = ["mixture_id", "source", "permutation", "input_sdr_db", "sdr_improvement_db", "magnitude_snr_db"]


def _ratio_db(num: float, den: float) -> float:
    if num <= 0.0:
        return -DB_CAP
    if den <= 0.0:
        return DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def si_sdr(estimate, reference) -> float:
    """Scale-invariant SDR in dB, capped at +/-100 dB."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("estimate and reference lengths differ")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("reference signal is all zero")
    target = (np.dot(est, ref) / ref_energy) * ref
    err = est - target
    return _ratio_db(float(np.dot(target, target)), float(np.dot(err, err)))


def magnitude_snr(est_mag, ref_mag) -> float:
    est = np.asarray(est_mag, dtype=np.float64)
    ref = np.asarray(ref_mag, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("magnitude shapes differ")
    ref_energy = float(np.sum(ref**2))
    if ref_energy == 0.0:
        raise ValueError("reference magnitude is all zero")
    return _ratio_db(ref_energy, float(np.sum((ref - est) ** 2)))


def ideal_binary_mask(ref_mags) -> np.ndarray:
    """``(C, ...)`` binary masks selecting the loudest source (ties to lowest index)."""
    return np.moveaxis(ideal_indicator(ref_mags), -1, 0)


def wiener_like_filter(ref_mags) -> np.ndarray:
    """``|s_c|^2 / sum_j |s_j|^2``; silent bins get ``1/C`` per source."""
    power = np.abs(np.asarray(ref_mags, dtype=np.float64)) ** 2
    C = power.shape[0]
    if C < 2:
        raise ValueError("need at least two sources")
    total = power.sum(axis=0)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, power / safe, 1.0 / C)


@dataclass
class EvalReport:
    mixture_id: str
    permutation: tuple
    sdr: np.ndarray  # per reference, of its matched estimate
    input_sdr: np.ndarray
    magnitude_snr: np.ndarray
    improvement: np.ndarray = field(init=False)

    def __post_init__(self):
        self.improvement = self.sdr - self.input_sdr

    @property
    def mean_improvement(self) -> float:
        return float(np.mean(self.improvement))

    def rows(self) -> list[dict]:
        perm = ",".join(str(k) for k in self.permutation)
        return [
            {
                "mixture_id": self.mixture_id, "source": c, "permutation": perm,
                "input_sdr_db": float(self.input_sdr[c]),
                "sdr_improvement_db": float(self.improvement[c]),
                "magnitude_snr_db": float(self.magnitude_snr[c]),
            }
            for c in range(len(self.permutation))
        ]


def evaluate_separation(estimates, references, mixture, mixture_id: str = "",
                        cfg: SignalConfig = SignalConfig()) -> EvalReport:
    """Match estimates to references by maximum total SI-SDR and score them."""
    est = np.asarray(estimates, dtype=np.float64)
    ref = np.asarray(references, dtype=np.float64)
    mix = np.asarray(mixture, dtype=np.float64)
    if est.shape != ref.shape or ref.shape[1:] != mix.shape:
        raise ValueError("estimates, references and mixture must share C and length")
    C = ref.shape[0]
    scores = np.array([[si_sdr(est[k], ref[c]) for k in range(C)] for c in range(C)])
    _, perm = best_permutation(scores, maximize=True)
    sdr = np.array([scores[c, perm[c]] for c in range(C)])
    input_sdr = np.array([si_sdr(mix, ref[c]) for c in range(C)])
    mag = np.array([magnitude_snr(np.abs(stft(est[perm[c]], cfg)), np.abs(stft(ref[c], cfg))) for c in range(C)])
    return EvalReport(mixture_id=mixture_id, permutation=perm, sdr=sdr, input_sdr=input_sdr, magnitude_snr=mag)


def write_report_tsv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, delimiter="\t", lineterminator="\n")
        writer.writeheader()
        for rep in reports:
            for row in rep.rows():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_report_tsv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report columns {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({
                "mixture_id": row["mixture_id"], "source": int(row["source"]),
                "permutation": tuple(int(k) for k in row["permutation"].split(",")),
                "input_sdr_db": float(row["input_sdr_db"]),
                "sdr_improvement_db": float(row["sdr_improvement_db"]),
                "magnitude_snr_db": float(row["magnitude_snr_db"]),
            })
        return rows


def summarize(rows: list[dict], groups: dict[str, str] | None = None) -> dict[str, dict]:
    """Mean improvement / magnitude SNR overall and per group label of each mixture."""
    buckets: dict[str, list[dict]] = {"overall": list(rows)}
    if groups:
        for row in rows:
            label = groups.get(row["mixture_id"])
            if label is not None:
                buckets.setdefault(label, []).append(row)
    out = {}
    for name, items in buckets.items():
        if not items:
            continue
        out[name] = {
            "count": len(items),
            "sdr_improvement_db": float(np.mean([r["sdr_improvement_db"] for r in items])),
            "magnitude_snr_db": float(np.mean([r["magnitude_snr_db"] for r in items])),
        }
    return out


def write_summary_tsv(path: str | Path, summary: dict[str, dict]) -> None:
    with open(path, "w") as fh:
        fh.write("group\tcount\tsdr_improvement_db\tmagnitude_snr_db\n")
        for name, s in summary.items():
            fh.write(f"{name}\t{s['count']}\t{s['sdr_improvement_db']!r}\t{s['magnitude_snr_db']!r}\n")
