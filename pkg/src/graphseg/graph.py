"""Tissue graph construction: RAG edges, patch-based node features, serialization."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .imaging import ImagingError, SuperpixelMap, check_image

GRAPH_SCHEMA_VERSION = 1
PATCH_SIZE = 144
ENCODER_INPUT_SIZE = 224

PATTERN_CLASSES = ("B", "G3", "G4", "G5")
UNLABELED = -1


class GraphError(ValueError):
    pass


@dataclass
class TissueGraph:
    """Superpixel tissue graph: nodes are merged superpixels, edges are adjacencies.

    features is |V| x d (morphology only); centroids is |V| x 2 in [0,1]^2 and
    is concatenated to features at model input time.
    """

    features: np.ndarray
    centroids: np.ndarray
    edges: set[tuple[int, int]]
    node_labels: np.ndarray | None = None  # class index per node, -1 = unlabeled
    image_label: tuple[str, str] | None = None  # (primary, secondary) strings
    graph_id: str = ""

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        n = self.num_nodes
        if self.centroids.shape != (n, 2):
            raise GraphError("centroids shape mismatch")
        if not np.all(np.isfinite(self.features)):
            raise GraphError("non-finite node feature")
        if self.centroids.size and (self.centroids.min() < 0 or self.centroids.max() > 1):
            raise GraphError("centroid outside [0,1]^2")
        for a, b in self.edges:
            if a == b:
                raise GraphError("self-loop edge")
            if not (0 <= a < n and 0 <= b < n):
                raise GraphError("edge endpoint out of range")
            if a > b:
                raise GraphError("edges must be stored as (min,max) pairs")
        if self.node_labels is not None and self.node_labels.shape != (n,):
            raise GraphError("node_labels shape mismatch")
        if self.image_label is not None:
            p, s = self.image_label
            if p not in PATTERN_CLASSES or s not in PATTERN_CLASSES:
                raise GraphError(f"invalid image label {self.image_label!r}")

    def adjacency_lists(self) -> list[list[int]]:
        neigh: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for a, b in sorted(self.edges):
            neigh[a].append(b)
            neigh[b].append(a)
        return [sorted(ns) for ns in neigh]


# ---------------------------------------------------------------------------
# topology

def build_rag(sp: SuperpixelMap) -> set[tuple[int, int]]:
    """Edges between segments sharing a 4-adjacent pixel pair."""
    labels = sp.labels
    edges: set[tuple[int, int]] = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        for pa, pb in zip(a[diff].ravel(), b[diff].ravel()):
            edges.add((min(int(pa), int(pb)), max(int(pa), int(pb))))
    return edges


# ---------------------------------------------------------------------------
# encoders

class PatchEncoder:
    """Deterministic fixed-dimension encoder of 224x224 RGB patches."""

    dim: int

    def encode(self, patch: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class DefaultEncoder(PatchEncoder):
    """Handcrafted 64-dim descriptor: 3x16 histogram fractions, per-channel
    mean/std scaled to [0,1], and a 10-bin gradient orientation histogram."""

    dim = 64

    def encode(self, patch: np.ndarray) -> np.ndarray:
        patch = check_image(patch)
        if patch.shape[:2] != (ENCODER_INPUT_SIZE, ENCODER_INPUT_SIZE):
            raise GraphError(f"encoder expects {ENCODER_INPUT_SIZE}x{ENCODER_INPUT_SIZE} patches")
        x = patch.astype(np.float64)
        parts = []
        for c in range(3):
            bins = np.bincount(np.minimum(patch[:, :, c].ravel() // 16, 15), minlength=16)
            parts.append(bins / bins.sum())
        for c in range(3):
            parts.append([x[:, :, c].mean() / 255.0, x[:, :, c].std() / 255.0])
        gray = x.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        total = mag.sum()
        if total > 0:
            ang = np.mod(np.arctan2(gy, gx), np.pi)
            idx = np.minimum((ang / np.pi * 10).astype(np.int64), 9)
            orient = np.bincount(idx.ravel(), weights=mag.ravel(), minlength=10) / total
        else:
            orient = np.zeros(10)
        parts.append(orient)
        return np.concatenate(parts)


class PrecomputedEncoder(PatchEncoder):
    """Serves externally computed per-segment embeddings from a sidecar CSV.

    The CSV has rows segment_id, v0..v{d-1}; lookups bypass patch encoding so
    extract_node_features must be given the embeddings directly instead.
    """

    def __init__(self, embeddings: dict[int, np.ndarray]):
        if not embeddings:
            raise GraphError("empty embedding sidecar")
        dims = {v.shape[0] for v in embeddings.values()}
        if len(dims) != 1:
            raise GraphError("inconsistent embedding dimensions")
        self.embeddings = embeddings
        self.dim = dims.pop()


def load_embedding_sidecar(path: str) -> dict[int, np.ndarray]:
    embeddings: dict[int, np.ndarray] = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row:
                continue
            embeddings[int(row[0])] = np.array([float(v) for v in row[1:]], dtype=np.float64)
    if not embeddings:
        raise GraphError(f"no embeddings in {path}")
    return embeddings


# ---------------------------------------------------------------------------
# node features

def _bilinear_resize(patch: np.ndarray, size: int) -> np.ndarray:
    return np.asarray(Image.fromarray(patch).resize((size, size), Image.BILINEAR))


def _clamped_window(h: int, w: int, x0: int, y0: int) -> tuple[int, int]:
    x0 = max(0, min(x0, max(0, w - PATCH_SIZE)))
    y0 = max(0, min(y0, max(0, h - PATCH_SIZE)))
    return x0, y0


def _masked_patch(img: np.ndarray, mask: np.ndarray, fill: np.ndarray,
                  x0: int, y0: int) -> np.ndarray:
    """Crop the patch window and replace pixels outside the segment with the
    segment's mean color, so the descriptor reflects one region even when the
    window spills over its boundary (inevitable on images smaller than the
    nominal patch size)."""
    h, w = img.shape[:2]
    x0, y0 = _clamped_window(h, w, x0, y0)
    crop = img[y0:min(h, y0 + PATCH_SIZE), x0:min(w, x0 + PATCH_SIZE)]
    crop_mask = mask[y0:min(h, y0 + PATCH_SIZE), x0:min(w, x0 + PATCH_SIZE)]
    out = np.empty_like(crop)
    out[:] = fill
    out[crop_mask] = crop[crop_mask]
    return out


def segment_patches(img: np.ndarray, sp: SuperpixelMap, segment: int, stride: int) -> list[np.ndarray]:
    """144x144 patches tiled at `stride` over the segment bounding box, kept when
    the patch center pixel lies inside the segment; falls back to one patch
    centered on the centroid (edge-clamped). Pixels outside the segment are
    filled with the segment's mean color."""
    mask = sp.labels == segment
    ys, xs = np.nonzero(mask)
    h, w = img.shape[:2]
    fill = np.clip(np.rint(img[mask].reshape(-1, img.shape[2]).mean(axis=0)),
                   0, 255).astype(img.dtype)
    patches = []
    for y0 in range(ys.min(), ys.max() + 1, stride):
        for x0 in range(xs.min(), xs.max() + 1, stride):
            cy = min(h - 1, y0 + PATCH_SIZE // 2)
            cx = min(w - 1, x0 + PATCH_SIZE // 2)
            if mask[cy, cx]:
                patches.append(_masked_patch(img, mask, fill, x0, y0))
    if not patches:
        cx = int(round(xs.mean()))
        cy = int(round(ys.mean()))
        patches.append(_masked_patch(img, mask, fill,
                                     cx - PATCH_SIZE // 2, cy - PATCH_SIZE // 2))
    return patches


def extract_node_features(
    img: np.ndarray,
    sp: SuperpixelMap,
    encoder: PatchEncoder,
    patch_stride: int = PATCH_SIZE,
    augment_fn=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-segment morphology features (mean of patch encodings) and normalized
    centroids. augment_fn, when given, maps each raw patch to a transformed one
    before encoding."""
    img = check_image(img)
    h, w = img.shape[:2]
    features = np.zeros((sp.num_segments, encoder.dim))
    centroids = np.zeros((sp.num_segments, 2))
    for seg in range(sp.num_segments):
        ys, xs = np.nonzero(sp.labels == seg)
        centroids[seg] = (xs.mean() / w, ys.mean() / h)
        encodings = []
        for patch in segment_patches(img, sp, seg, patch_stride):
            if augment_fn is not None:
                patch = augment_fn(patch)
            encodings.append(encoder.encode(_bilinear_resize(patch, ENCODER_INPUT_SIZE)))
        features[seg] = np.mean(encodings, axis=0)
    return features, centroids


def build_tissue_graph(
    img: np.ndarray,
    sp: SuperpixelMap,
    encoder: PatchEncoder,
    image_label: tuple[str, str] | None = None,
    node_labels: np.ndarray | None = None,
    patch_stride: int = PATCH_SIZE,
    graph_id: str = "",
    precomputed: dict[int, np.ndarray] | None = None,
    augment_fn=None,
) -> TissueGraph:
    if precomputed is not None:
        missing = [s for s in range(sp.num_segments) if s not in precomputed]
        if missing:
            raise GraphError(f"embedding sidecar missing segments {missing}")
        features = np.stack([precomputed[s] for s in range(sp.num_segments)])
        _, centroids = extract_node_features(img, sp, _CentroidOnly(), patch_stride)
    else:
        features, centroids = extract_node_features(img, sp, encoder, patch_stride, augment_fn)
    g = TissueGraph(
        features=features,
        centroids=centroids,
        edges=build_rag(sp),
        node_labels=node_labels,
        image_label=image_label,
        graph_id=graph_id,
    )
    g.validate()
    return g


class _CentroidOnly(PatchEncoder):
    dim = 1

    def encode(self, patch):
        return np.zeros(1)


# ---------------------------------------------------------------------------
# serialization

def save_graph(g: TissueGraph, path: str) -> None:
    g.validate()
    doc = {
        "version": GRAPH_SCHEMA_VERSION,
        "graph_id": g.graph_id,
        "num_nodes": g.num_nodes,
        "feature_dim": g.feature_dim,
        "features": g.features.ravel().tolist(),
        "centroids": g.centroids.ravel().tolist(),
        "edges": sorted([list(e) for e in g.edges]),
        "node_labels": (g.node_labels.tolist() if g.node_labels is not None
                        else [UNLABELED] * g.num_nodes),
        "image_label": ({"primary": g.image_label[0], "secondary": g.image_label[1]}
                        if g.image_label is not None else None),
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f)
    os.replace(tmp, path)


def load_graph(path: str) -> TissueGraph:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (json.JSONDecodeError, OSError) as exc:
        raise GraphError(f"malformed graph file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "version" not in doc:
        raise GraphError(f"malformed graph file {path}: missing version")
    if doc["version"] != GRAPH_SCHEMA_VERSION:
        raise GraphError(f"unsupported graph schema version {doc['version']}")
    try:
        n = int(doc["num_nodes"])
        d = int(doc["feature_dim"])
        features = np.array(doc["features"], dtype=np.float64).reshape(n, d)
        centroids = np.array(doc["centroids"], dtype=np.float64).reshape(n, 2)
        edges = {(int(a), int(b)) for a, b in doc["edges"]}
        node_labels = np.array(doc["node_labels"], dtype=np.int64)
        raw_label = doc["image_label"]
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph file {path}: {exc}") from exc
    if np.all(node_labels == UNLABELED):
        labels = None
    else:
        labels = node_labels
    image_label = None
    if raw_label is not None:
        image_label = (raw_label["primary"], raw_label["secondary"])
    g = TissueGraph(features=features, centroids=centroids, edges=edges,
                    node_labels=labels, image_label=image_label,
                    graph_id=doc.get("graph_id", ""))
    g.validate()
    return g
