"""Overlap metrics for binary segmentation and multi-seed aggregation."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


def _check_pair(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); returns 1.0 when both masks are empty."""
    pred, truth = _check_pair(pred, truth)
    inter = float(np.sum(pred * truth))
    total = float(np.sum(pred) + np.sum(truth))
    if total == 0.0:
        return 1.0
    return 2.0 * inter / total


def jaccard(pred: np.ndarray, truth: np.ndarray) -> float:
    """|A∩B| / |A∪B|; returns 1.0 when both masks are empty."""
    pred, truth = _check_pair(pred, truth)
    inter = float(np.sum(pred * truth))
    union = float(np.sum(pred) + np.sum(truth) - inter)
    if union == 0.0:
        return 1.0
    return inter / union


@dataclass
class EvalRecord:
    iteration: int
    split: str  # train | val | test
    dice: float
    jaccard: float
    loss_seg: float = 0.0
    loss_g: float = 0.0
    loss_d: float = 0.0


CSV_HEADER = "iter,split,dice,jaccard,loss_seg,loss_g,loss_d"


def records_to_csv(records) -> str:
    """CSV text: fixed header, 6 decimal places, line-feed terminated rows."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for r in records:
        buf.write(f"{r.iteration},{r.split},{r.dice:.6f},{r.jaccard:.6f},"
                  f"{r.loss_seg:.6f},{r.loss_g:.6f},{r.loss_d:.6f}\n")
    return buf.getvalue()


def write_csv(records, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(records_to_csv(records))


def read_csv(path) -> list[EvalRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected CSV header: {header!r}")
        for line in f:
            if not line.strip():
                continue
            it, split, d, j, ls, lg, ld = line.strip().split(",")
            out.append(EvalRecord(int(it), split, float(d), float(j),
                                  float(ls), float(lg), float(ld)))
    return out


def aggregate(per_seed_values) -> tuple[float, float]:
    """Sample mean and standard deviation (ddof=1; zero for a single value)."""
    vals = np.asarray(list(per_seed_values), dtype=np.float64)
    if vals.size == 0:
        raise ValueError("aggregate needs at least one value")
    mean = float(np.mean(vals))
    std = 0.0 if vals.size < 2 else float(np.std(vals, ddof=1))
    return mean, std
