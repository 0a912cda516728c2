"""Data emitters behind the diagnostic figures.

* scatter: per-source (input SDR, SDR improvement) pairs from evaluation reports
* revcor: spike-triggered averages of input log-magnitude patches for every
  hidden node of one BLSTM layer
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SCATTER_COLUMNS = ["mixture_id", "source", "input_sdr_db", "improvement_db"]


def scatter_points(rows):
    """Plot-ready rows from report rows (dicts with the report columns)."""
    out = []
    for r in rows:
        x, y = float(r["input_sdr_db"]), float(r["sdr_improvement_db"])
        if not (np.isfinite(x) and np.isfinite(y)):
            raise ValueError(f"non-finite value in report row for {r['mixture_id']}")
        out.append({"mixture_id": r["mixture_id"], "source": int(r["source"]),
                    "input_sdr_db": x, "improvement_db": y})
    return out


def write_scatter_tsv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(SCATTER_COLUMNS)
        for p in points:
            wr.writerow([p["mixture_id"], p["source"], repr(p["input_sdr_db"]), repr(p["improvement_db"])])


def read_scatter_tsv(path):
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh, delimiter="\t")
        if rd.fieldnames != SCATTER_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {rd.fieldnames}")
        return [{"mixture_id": r["mixture_id"], "source": int(r["source"]),
                 "input_sdr_db": float(r["input_sdr_db"]), "improvement_db": float(r["improvement_db"])}
                for r in rd]


@dataclass
class RevcorResult:
    counts: np.ndarray  # (K,) active frames with a full patch, per node
    patches: list  # K arrays of shape (context, F), or (0, F) when the node never fired
    node_max: np.ndarray  # (K,)
    threshold: float
    context: int


def activation_cutoff(node_max, threshold: float):
    """Per-node activity level; equals ``threshold * max`` for positive maxima.

    Written as ``max - (1 - threshold) |max|`` so that a node whose maximum is
    negative still counts its maximising frames as active.
    """
    node_max = np.asarray(node_max, dtype=np.float64)
    return node_max - (1.0 - threshold) * np.abs(node_max)


def revcor(pairs, threshold: float = 0.8, context: int = 50) -> RevcorResult:
    """Average the ``context``-frame input patches centred on active frames.

    ``pairs`` is a sequence of ``(inputs (T, F), activations (T, K))`` per
    utterance. A frame ``t`` is active for node ``k`` when its activation
    reaches the cutoff derived from the node's maximum over the whole corpus.
    The patch covers frames ``t - context//2 .. t + context - context//2 - 1``;
    frames too close to an utterance edge for a full patch are skipped.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    if context < 1:
        raise ValueError("context must be positive")
    pairs = [(np.asarray(x, dtype=np.float64), np.asarray(a, dtype=np.float64)) for x, a in pairs]
    if not pairs:
        raise ValueError("empty corpus")
    F, K = pairs[0][0].shape[1], pairs[0][1].shape[1]
    for x, a in pairs:
        if x.shape[0] != a.shape[0] or x.shape[1] != F or a.shape[1] != K:
            raise ValueError("inconsistent input/activation shapes")
    node_max = np.max([a.max(axis=0) for x, a in pairs], axis=0)
    cut = activation_cutoff(node_max, threshold)
    half = context // 2
    sums = np.zeros((K, context, F))
    counts = np.zeros(K, dtype=np.int64)
    for x, a in pairs:
        T = x.shape[0]
        lo, hi = half, T - (context - half)
        if hi < lo:
            continue
        windows = np.lib.stride_tricks.sliding_window_view(x, context, axis=0)  # (T-context+1, F, context)
        active = a[lo : hi + 1] >= cut  # rows are centre frames lo..hi
        counts += active.sum(axis=0)
        sums += np.einsum("tk,tfc->kcf", active.astype(np.float64), windows)
    patches = [sums[k] / counts[k] if counts[k] else np.zeros((0, F)) for k in range(K)]
    return RevcorResult(counts=counts, patches=patches, node_max=node_max, threshold=threshold, context=context)


def write_revcor(out_dir, result: RevcorResult, layer: int) -> Path:
    """Write ``counts.tsv`` and ``patches.npz`` (one array per node) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "counts.tsv", "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(["layer", "node", "n_active", "node_max"])
        for k, n in enumerate(result.counts):
            wr.writerow([layer, k, int(n), repr(float(result.node_max[k]))])
    np.savez(out / "patches.npz", **{f"node{k:04d}": p for k, p in enumerate(result.patches)})
    return out
