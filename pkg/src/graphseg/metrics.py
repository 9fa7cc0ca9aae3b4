"""Evaluation metrics: Dice, weighted F1, quadratic kappa, Brier, NLL, ECE,
reliability bins, confusion matrices."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np


class MetricError(ValueError):
    pass


def dice_scores(pred_masks, gt_masks, classes) -> tuple[dict, float]:
    """Micro-pooled per-class Dice over all images plus the unweighted average
    of classes present in pred or gt."""
    if len(pred_masks) != len(gt_masks):
        raise MetricError("pred/gt mask count mismatch")
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for pred, gt in zip(pred_masks, gt_masks):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError("mask dimension mismatch")
        for c in classes:
            p = pred == c
            g = gt == c
            tp[c] += int(np.count_nonzero(p & g))
            fp[c] += int(np.count_nonzero(p & ~g))
            fn[c] += int(np.count_nonzero(~p & g))
    per_class = {}
    included = []
    for c in classes:
        denom = 2 * tp[c] + fp[c] + fn[c]
        if denom == 0:
            per_class[c] = None  # absent from both pred and gt
            continue
        per_class[c] = 2 * tp[c] / denom
        included.append(per_class[c])
    if not included:
        raise MetricError("no class present in any mask")
    return per_class, float(np.mean(included))


def weighted_f1(preds, gts) -> float:
    """Per-class F1 weighted by ground-truth support, summed."""
    preds = list(preds)
    gts = list(gts)
    if not gts or len(preds) != len(gts):
        raise MetricError("empty or mismatched label lists")
    labels = sorted(set(gts) | set(preds))
    n = len(gts)
    total = 0.0
    for lab in labels:
        tp = sum(1 for p, g in zip(preds, gts) if p == lab and g == lab)
        fp = sum(1 for p, g in zip(preds, gts) if p == lab and g != lab)
        fn = sum(1 for p, g in zip(preds, gts) if p != lab and g == lab)
        support = tp + fn
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
        total += f1 * support / n
    return total


def quadratic_kappa(preds, gts, num_grades: int = 6) -> float:
    """Cohen's kappa with quadratic weights over ordinal grades 0..num_grades-1.

    A degenerate expected-agreement denominator (single identical class on
    both sides) is defined as perfect agreement, 1.
    """
    preds = np.asarray(preds, dtype=np.int64)
    gts = np.asarray(gts, dtype=np.int64)
    if preds.size == 0 or preds.shape != gts.shape:
        raise MetricError("empty or mismatched grade lists")
    if preds.min() < 0 or preds.max() >= num_grades or gts.min() < 0 or gts.max() >= num_grades:
        raise MetricError("grade outside range")
    n = preds.size
    observed = np.zeros((num_grades, num_grades))
    for p, g in zip(preds, gts):
        observed[g, p] += 1
    row = observed.sum(axis=1)
    col = observed.sum(axis=0)
    expected = np.outer(row, col) / n
    idx = np.arange(num_grades)
    w = (idx[:, None] - idx[None, :]) ** 2 / (num_grades - 1) ** 2
    denom = (w * expected).sum()
    if denom == 0:
        return 1.0
    return 1.0 - (w * observed).sum() / denom


def brier_nll(probs, targets) -> tuple[float, float]:
    """Brier: mean over samples of the summed squared error against the one-hot
    target. NLL: mean negative log-probability of the target class."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != targets.shape[0] or probs.shape[0] == 0:
        raise MetricError("probability matrix / target mismatch")
    if probs.min() < 0:
        raise MetricError("negative probability")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-9):
        raise MetricError("probability rows must sum to 1")
    n, k = probs.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), targets] = 1.0
    brier = float(((probs - onehot) ** 2).sum(axis=1).mean())
    # clip guards log(0); reported NLL stays finite
    nll = float(-np.log(np.maximum(probs[np.arange(n), targets], 1e-300)).mean())
    return brier, nll


def _bin_index(confidence: float, num_bins: int) -> int:
    # half-open bins (l, u], first bin [0, u]
    idx = int(np.ceil(confidence * num_bins)) - 1
    return min(max(idx, 0), num_bins - 1)


def reliability_bins(confidences, correct, num_bins: int = 10) -> list[dict]:
    """Per-bin sample count, mean confidence, and accuracy."""
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if confidences.size == 0 or confidences.shape != correct.shape:
        raise MetricError("empty or mismatched confidence lists")
    if num_bins < 1:
        raise MetricError("need at least one bin")
    if confidences.min() < 0 or confidences.max() > 1:
        raise MetricError("confidence outside [0,1]")
    bins = [{"count": 0, "confidence_sum": 0.0, "correct": 0} for _ in range(num_bins)]
    for conf, ok in zip(confidences, correct):
        b = bins[_bin_index(conf, num_bins)]
        b["count"] += 1
        b["confidence_sum"] += float(conf)
        b["correct"] += int(ok)
    out = []
    for i, b in enumerate(bins):
        out.append({
            "bin": i,
            "lower": i / num_bins,
            "upper": (i + 1) / num_bins,
            "count": b["count"],
            "mean_confidence": b["confidence_sum"] / b["count"] if b["count"] else 0.0,
            "accuracy": b["correct"] / b["count"] if b["count"] else 0.0,
        })
    return out


def ece(confidences, correct, num_bins: int = 10) -> float:
    """Sum over bins of (N_b / N) * |accuracy(b) - mean confidence(b)|."""
    bins = reliability_bins(confidences, correct, num_bins)
    n = sum(b["count"] for b in bins)
    return sum(b["count"] / n * abs(b["accuracy"] - b["mean_confidence"])
               for b in bins if b["count"])


def confusion_matrix(preds, gts, labels) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    labels = list(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    mat = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for p, g in zip(preds, gts):
        if p not in index or g not in index:
            raise MetricError(f"label outside set: {p!r} / {g!r}")
        mat[index[g], index[p]] += 1
    return mat


@dataclass
class MetricReport:
    dice_per_class: dict = field(default_factory=dict)
    dice_avg: float | None = None
    weighted_f1: float | None = None
    quadratic_kappa: float | None = None
    brier: dict = field(default_factory=dict)  # keys primary/secondary/combined
    nll: dict = field(default_factory=dict)
    ece: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)  # keys gg/isup/primary/secondary
    reliability: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["confusion"] = {k: {"labels": v["labels"], "matrix": np.asarray(v["matrix"]).tolist()}
                            for k, v in self.confusion.items()}
        return json.dumps(doc, indent=2)

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            f.write(self.to_json())
        os.replace(tmp, path)


def save_reliability_csv(path: str, bins: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])
        for b in bins:
            writer.writerow([b["bin"], b["lower"], b["upper"], b["count"],
                             repr(b["mean_confidence"]), repr(b["accuracy"])])
    os.replace(tmp, path)
