"""Gradient-based node attribution and pseudo-label synthesis.

Attribution follows the Grad-CAM recipe on the concatenated node embeddings:
channel weights are the mean over nodes of d logit_k / d embedding, and the
node score is the ReLU of the weighted channel sum.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .gleason import CLASS_INDEX, PATTERN_CLASSES, GleasonLabel
from .graph import TissueGraph
from .model import TissueGraphModel


class AttributionError(ValueError):
    pass


def graph_grad_cam(model: TissueGraphModel, g: TissueGraph, class_index: int,
                   head: str = "primary") -> np.ndarray:
    """Raw (nonnegative, unnormalized) per-node importance for one class logit."""
    if head not in ("primary", "secondary"):
        raise AttributionError(f"unknown head {head!r}")
    result = model.forward(g, training=False)
    logits = result.logits_primary if head == "primary" else result.logits_secondary
    target = ad.pick(logits, 0, class_index)
    target.backward()
    emb_grad = result.node_embeddings.grad  # |V| x C
    alpha = emb_grad.mean(axis=0)  # channel weights
    scores = result.node_embeddings.data @ alpha
    return np.maximum(scores, 0.0)


def minmax_normalize(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise AttributionError("no scores")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


@dataclass
class PseudoLabelSet:
    """Disjoint per-node class assignments with the selection scores."""

    assignments: dict[int, str] = field(default_factory=dict)
    scores: dict[int, float] = field(default_factory=dict)
    n_percent: float = 0.0
    threshold: float = 0.0

    def labels_array(self, num_nodes: int) -> np.ndarray:
        out = np.full(num_nodes, -1, dtype=np.int64)
        for node, cls in self.assignments.items():
            out[node] = CLASS_INDEX[cls]
        return out


def _top_candidates(scores: np.ndarray, threshold: float, cap: int) -> list[int]:
    eligible = [v for v in range(scores.size) if scores[v] >= threshold]
    eligible.sort(key=lambda v: (-scores[v], v))
    return eligible[:cap]


def synthesize_pseudo_labels(scores_primary: np.ndarray, scores_secondary: np.ndarray,
                             label: GleasonLabel, n_percent: float,
                             threshold: float) -> PseudoLabelSet:
    """Select top n% nodes above threshold per class map; overlaps resolve to the
    larger score (tie -> primary). A benign image labels every node benign."""
    if not (0.0 < n_percent <= 100.0):
        raise AttributionError("n_percent must lie in (0,100]")
    if not (0.0 <= threshold < 1.0):
        raise AttributionError("threshold must lie in [0,1)")
    ip = np.asarray(scores_primary, dtype=np.float64)
    isec = np.asarray(scores_secondary, dtype=np.float64)
    if ip.shape != isec.shape:
        raise AttributionError("attribution maps cover different node sets")
    num_nodes = ip.size
    out = PseudoLabelSet(n_percent=n_percent, threshold=threshold)

    if label.is_benign:
        for v in range(num_nodes):
            out.assignments[v] = "B"
            out.scores[v] = 1.0
        return out

    cap = math.ceil(n_percent / 100.0 * num_nodes)
    selected_p = _top_candidates(ip, threshold, cap)
    if label.primary == label.secondary:
        for v in selected_p:
            out.assignments[v] = label.primary
            out.scores[v] = float(ip[v])
        return out

    selected_s = _top_candidates(isec, threshold, cap)
    both = set(selected_p) & set(selected_s)
    for v in selected_p:
        if v in both and isec[v] > ip[v]:
            continue
        out.assignments[v] = label.primary
        out.scores[v] = float(ip[v])
    for v in selected_s:
        if v in both and isec[v] <= ip[v]:
            continue
        out.assignments[v] = label.secondary
        out.scores[v] = float(isec[v])
    return out


def attribution_maps(model: TissueGraphModel, g: TissueGraph,
                     label: GleasonLabel) -> tuple[np.ndarray, np.ndarray]:
    """Normalized primary/secondary attribution maps for the labeled classes."""
    ip = minmax_normalize(graph_grad_cam(model, g, CLASS_INDEX[label.primary], "primary"))
    isec = minmax_normalize(graph_grad_cam(model, g, CLASS_INDEX[label.secondary], "secondary"))
    return ip, isec


def attribution_argmax_classes(model: TissueGraphModel, g: TissueGraph) -> np.ndarray:
    """Baseline segmentation: per-node argmax over the normalized class-wise
    attribution maps of the primary head (ties -> lower class index)."""
    maps = np.stack([
        minmax_normalize(graph_grad_cam(model, g, k, "primary"))
        for k in range(len(PATTERN_CLASSES))
    ])
    return np.argmax(maps, axis=0)


# ---------------------------------------------------------------------------
# CSV interchange

def save_pseudo_labels(path: str, per_graph: dict[str, PseudoLabelSet]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["graph_id", "node_id", "class", "score"])
        for graph_id in sorted(per_graph):
            pls = per_graph[graph_id]
            for node in sorted(pls.assignments):
                writer.writerow([graph_id, node, pls.assignments[node],
                                 repr(pls.scores[node])])
    os.replace(tmp, path)


def load_pseudo_labels(path: str) -> dict[str, PseudoLabelSet]:
    per_graph: dict[str, PseudoLabelSet] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["graph_id", "node_id", "class", "score"]:
            raise AttributionError(f"malformed pseudo-label file {path}")
        for row in reader:
            graph_id, node_id, cls, score = row
            if cls not in PATTERN_CLASSES:
                raise AttributionError(f"invalid class {cls!r} in {path}")
            pls = per_graph.setdefault(graph_id, PseudoLabelSet())
            pls.assignments[int(node_id)] = cls
            pls.scores[int(node_id)] = float(score)
    return per_graph
