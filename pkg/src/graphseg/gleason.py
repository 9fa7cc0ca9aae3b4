"""Gleason label algebra, class weights, loss composition, mask reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import SuperpixelMap

PATTERN_CLASSES = ("B", "G3", "G4", "G5")
CLASS_INDEX = {c: i for i, c in enumerate(PATTERN_CLASSES)}
GRADE_VALUE = {"G3": 3, "G4": 4, "G5": 5}


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class GleasonLabel:
    primary: str
    secondary: str

    def __post_init__(self):
        if self.primary not in PATTERN_CLASSES or self.secondary not in PATTERN_CLASSES:
            raise LabelError(f"invalid pattern in {(self.primary, self.secondary)!r}")
        if (self.primary == "B") != (self.secondary == "B"):
            raise LabelError("benign primary requires benign secondary and vice versa")

    @property
    def is_benign(self) -> bool:
        return self.primary == "B"

    @property
    def score(self) -> int | None:
        if self.is_benign:
            return None
        return GRADE_VALUE[self.primary] + GRADE_VALUE[self.secondary]

    def gg_string(self) -> str:
        if self.is_benign:
            return "B"
        return f"{GRADE_VALUE[self.primary]}+{GRADE_VALUE[self.secondary]}"


def gleason_to_isup(label: GleasonLabel) -> int:
    """Benign -> 0, 3+3 -> 1, 3+4 -> 2, 4+3 -> 3, score 8 -> 4, score >= 9 -> 5."""
    if label.is_benign:
        return 0
    score = label.score
    if score == 6:
        return 1
    if score == 7:
        return 2 if label.primary == "G3" else 3
    if score == 8:
        return 4
    return 5


def class_weights(counts) -> np.ndarray:
    """w_i = ln(sum_j N_j / N_i); zero-count classes clamp to the max defined weight."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise LabelError("all class counts are zero")
    weights = np.full(counts.shape, np.nan)
    nonzero = counts > 0
    weights[nonzero] = np.log(total / counts[nonzero])
    if not nonzero.all():
        weights[~nonzero] = weights[nonzero].max()
    return weights


def weighted_ce(logits: Tensor, targets, weights) -> Tensor:
    """Mean weighted cross-entropy; accepts 1 x K logits with a single target or
    n x K logits with n targets."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    return ad.weighted_cross_entropy(logits, targets, np.asarray(weights, dtype=np.float64))


def graph_loss(logits_p: Tensor, logits_s: Tensor, label: GleasonLabel,
               lam: float, weights) -> Tensor:
    """lam * CE(primary) + (1 - lam) * CE(secondary)."""
    if not (0.0 <= lam <= 1.0):
        raise LabelError("lambda must lie in [0,1]")
    ce_p = weighted_ce(logits_p, [CLASS_INDEX[label.primary]], weights)
    ce_s = weighted_ce(logits_s, [CLASS_INDEX[label.secondary]], weights)
    return ad.add_scaled([(lam, ce_p), (1.0 - lam, ce_s)])


def node_loss(node_logits: Tensor, node_labels: np.ndarray, weights) -> Tensor:
    """Weighted CE averaged over labeled nodes (label -1 = excluded)."""
    node_labels = np.asarray(node_labels, dtype=np.int64)
    labeled = np.nonzero(node_labels >= 0)[0]
    if labeled.size == 0:
        raise LabelError("no labeled nodes")
    picked = ad.gather_rows(node_logits, labeled)
    return weighted_ce(picked, node_labels[labeled], weights)


def decode_prediction(probs_p: np.ndarray, probs_s: np.ndarray) -> tuple[GleasonLabel, bool]:
    """Argmax decode with coercion to a consistent label; returns (label, coerced)."""
    p = PATTERN_CLASSES[int(np.argmax(probs_p))]
    s = PATTERN_CLASSES[int(np.argmax(probs_s))]
    coerced = False
    if p == "B" and s != "B":
        s = "B"
        coerced = True
    elif p != "B" and s == "B":
        s = p
        coerced = True
    return GleasonLabel(p, s), coerced


def mask_from_node_labels(sp: SuperpixelMap, node_classes) -> np.ndarray:
    """Paint every pixel with its segment's class index."""
    node_classes = np.asarray(node_classes, dtype=np.int64)
    if node_classes.shape != (sp.num_segments,):
        raise LabelError("need exactly one class per segment")
    if np.any(node_classes < 0) or np.any(node_classes >= len(PATTERN_CLASSES)):
        raise LabelError("node class out of range")
    return node_classes[sp.labels]
