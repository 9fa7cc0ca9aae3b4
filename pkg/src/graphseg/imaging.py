"""Raster preprocessing: stain normalization, SLIC superpixels, color features, region merging.

Images are HxWx3 uint8 numpy arrays. Superpixel maps carry a contiguous
label raster where every label id in 0..num_segments-1 is present and each
label's pixel set is 4-connected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class ImagingError(ValueError):
    pass


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # HxW int32
    num_segments: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def validate(self) -> None:
        present = np.unique(self.labels)
        if present.size != self.num_segments or present[0] != 0 or present[-1] != self.num_segments - 1:
            raise ImagingError("superpixel labels must be exactly 0..num_segments-1")
        for lab in present:
            _, n = ndimage.label(self.labels == lab, structure=FOUR_CONN)
            if n != 1:
                raise ImagingError(f"segment {lab} is not 4-connected")


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ImagingError("expected HxWx3 RGB image")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ImagingError("channel values outside [0,255]")
        img = img.astype(np.uint8)
    return img


# ---------------------------------------------------------------------------
# image file I/O

def read_image(path: str) -> np.ndarray:
    """Read an 8-bit RGB image (PNG or PPM)."""
    with Image.open(path) as im:
        return check_image(np.asarray(im.convert("RGB")))


def write_image(img: np.ndarray, path: str) -> None:
    Image.fromarray(check_image(img), mode="RGB").save(path)


def save_superpixel_map(sp: SuperpixelMap, path: str) -> None:
    """16-bit single-channel PNG plus a sidecar text header with num_segments."""
    if sp.num_segments > 65535:
        raise ImagingError("too many segments for 16-bit map")
    Image.fromarray(sp.labels.astype(np.uint16)).save(path)
    with open(_sidecar_path(path), "w") as f:
        f.write(f"num_segments={sp.num_segments}\n")


def load_superpixel_map(path: str) -> SuperpixelMap:
    with Image.open(path) as im:
        labels = np.asarray(im).astype(np.int32)
    with open(_sidecar_path(path)) as f:
        line = f.readline().strip()
    key, _, value = line.partition("=")
    if key != "num_segments":
        raise ImagingError(f"malformed superpixel sidecar: {line!r}")
    sp = SuperpixelMap(labels=labels, num_segments=int(value))
    sp.validate()
    return sp


def _sidecar_path(png_path: str) -> str:
    return os.path.splitext(png_path)[0] + ".txt"


# ---------------------------------------------------------------------------
# stain normalization

def normalize_stain(img: np.ndarray, ref_means, ref_stds) -> np.ndarray:
    """Match per-channel mean/std to the reference statistics, clamped to [0,255].

    A zero-variance input channel is shifted to the reference mean without
    rescaling.
    """
    img = check_image(img)
    ref_means = np.asarray(ref_means, dtype=np.float64)
    ref_stds = np.asarray(ref_stds, dtype=np.float64)
    if ref_means.shape != (3,) or ref_stds.shape != (3,):
        raise ImagingError("reference statistics must have 3 channels")
    if np.any(ref_stds <= 0):
        raise ImagingError("reference stds must be > 0")
    x = img.astype(np.float64)
    out = np.empty_like(x)
    for c in range(3):
        mu = x[:, :, c].mean()
        sigma = x[:, :, c].std()
        if sigma > 0:
            out[:, :, c] = (x[:, :, c] - mu) / sigma * ref_stds[c] + ref_means[c]
        else:
            out[:, :, c] = x[:, :, c] - mu + ref_means[c]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# color space

_SRGB_TO_XYZ = np.array(
    [[0.4124564, 0.3575761, 0.1804375],
     [0.2126729, 0.7151522, 0.0721750],
     [0.0193339, 0.1191920, 0.9503041]]
)
_D65 = np.array([0.95047, 1.0, 1.08883])


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB (uint8) to CIELab, D65 white point."""
    rgb = np.asarray(img, dtype=np.float64) / 255.0
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = lin @ _SRGB_TO_XYZ.T / _D65
    eps = 216.0 / 24389.0
    kappa = 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


# ---------------------------------------------------------------------------
# SLIC

def slic(img: np.ndarray, n_segments: int, compactness: float = 10.0, iters: int = 10) -> SuperpixelMap:
    """Grid-initialized SLIC over-segmentation with connectivity enforcement.

    Deterministic: centers start on a regular grid and pixels are visited in
    a fixed order, so the output is independent of any RNG.
    """
    img = check_image(img)
    h, w = img.shape[:2]
    n_pixels = h * w
    if n_segments < 1 or n_segments > n_pixels:
        raise ImagingError("too many segments")
    if n_segments == 1:
        return SuperpixelMap(labels=np.zeros((h, w), dtype=np.int32), num_segments=1)
    if compactness <= 0:
        raise ImagingError("compactness must be > 0")

    lab = rgb_to_lab(img)
    step = np.sqrt(n_pixels / n_segments)

    # grid init: wider-than-tall grids first so a 2-segment square splits vertically
    gw = max(1, int(np.ceil(np.sqrt(n_segments * w / h))))
    gh = int(np.ceil(n_segments / gw))
    cell_w = w / gw
    cell_h = h / gh
    centers = []
    for gy in range(gh):
        for gx in range(gw):
            if len(centers) == n_segments:
                break
            cx = min(w - 1, int((gx + 0.5) * cell_w))
            cy = min(h - 1, int((gy + 0.5) * cell_h))
            centers.append([lab[cy, cx, 0], lab[cy, cx, 1], lab[cy, cx, 2], float(cx), float(cy)])
    centers = np.array(centers, dtype=np.float64)
    k = centers.shape[0]

    yy, xx = np.mgrid[0:h, 0:w]
    ratio = (compactness / step) ** 2
    labels = np.zeros((h, w), dtype=np.int32)
    for _ in range(max(1, iters)):
        dist = np.full((h, w), np.inf)
        labels.fill(-1)
        for ci in range(k):
            lc = centers[ci, :3]
            cx, cy = centers[ci, 3], centers[ci, 4]
            x0 = max(0, int(cx - 2 * step))
            x1 = min(w, int(cx + 2 * step) + 1)
            y0 = max(0, int(cy - 2 * step))
            y1 = min(h, int(cy + 2 * step) + 1)
            win = lab[y0:y1, x0:x1]
            d_color = ((win - lc) ** 2).sum(axis=2)
            d_xy = (xx[y0:y1, x0:x1] - cx) ** 2 + (yy[y0:y1, x0:x1] - cy) ** 2
            d = d_color + ratio * d_xy
            closer = d < dist[y0:y1, x0:x1]
            dist[y0:y1, x0:x1][closer] = d[closer]
            labels[y0:y1, x0:x1][closer] = ci
        # pixels outside every search window: brute-force assignment
        miss = labels < 0
        if miss.any():
            my, mx = np.nonzero(miss)
            d_color = ((lab[my, mx][:, None, :] - centers[None, :, :3]) ** 2).sum(axis=2)
            d_xy = (mx[:, None] - centers[None, :, 3]) ** 2 + (my[:, None] - centers[None, :, 4]) ** 2
            labels[my, mx] = np.argmin(d_color + ratio * d_xy, axis=1)
        # update centers
        for ci in range(k):
            mask = labels == ci
            if mask.any():
                centers[ci, :3] = lab[mask].mean(axis=0)
                centers[ci, 3] = xx[mask].mean()
                centers[ci, 4] = yy[mask].mean()

    labels = _enforce_connectivity(labels, n_segments, n_pixels / n_segments)
    return SuperpixelMap(labels=labels, num_segments=int(labels.max()) + 1)


def _enforce_connectivity(labels: np.ndarray, max_segments: int, expected_area: float) -> np.ndarray:
    """Split disconnected segments into components, absorb tiny fragments, compact ids."""
    comp = np.full(labels.shape, -1, dtype=np.int32)
    n_comp = 0
    for lab in np.unique(labels):
        cc, n = ndimage.label(labels == lab, structure=FOUR_CONN)
        comp[cc > 0] = cc[cc > 0] - 1 + n_comp
        n_comp += n

    min_size = 0.25 * expected_area
    parent = list(range(n_comp))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    sizes = np.bincount(comp.ravel(), minlength=n_comp).astype(np.int64)
    adjacency = _component_adjacency(comp, n_comp)

    def absorb(threshold):
        changed = True
        while changed:
            changed = False
            roots = sorted({find(i) for i in range(n_comp)})
            if len(roots) <= 1:
                return
            root_sizes = {r: 0 for r in roots}
            for i in range(n_comp):
                root_sizes[find(i)] += int(sizes[i])
            small = sorted(r for r in roots if root_sizes[r] < threshold)
            for r in small:
                if find(r) != r:
                    continue
                neigh_roots = set()
                for i in range(n_comp):
                    if find(i) != r:
                        continue
                    for j in adjacency[i]:
                        fj = find(j)
                        if fj != r:
                            neigh_roots.add(fj)
                if not neigh_roots:
                    continue
                target = max(neigh_roots, key=lambda q: (root_sizes[q], -q))
                root_sizes[target] += root_sizes.pop(r)
                parent[r] = target
                changed = True

    absorb(min_size)
    # over budget: absorb smallest remaining components until within max_segments
    while True:
        roots = sorted({find(i) for i in range(n_comp)})
        if len(roots) <= max_segments or len(roots) <= 1:
            break
        root_sizes = {r: 0 for r in roots}
        for i in range(n_comp):
            root_sizes[find(i)] += int(sizes[i])
        smallest = min(roots, key=lambda q: (root_sizes[q], q))
        neigh_roots = set()
        for i in range(n_comp):
            if find(i) != smallest:
                continue
            for j in adjacency[i]:
                fj = find(j)
                if fj != smallest:
                    neigh_roots.add(fj)
        target = max(neigh_roots, key=lambda q: (root_sizes[q], -q))
        parent[smallest] = target

    merged = np.array([find(i) for i in range(n_comp)], dtype=np.int32)[comp]
    return _compact_labels(merged)


def _component_adjacency(comp: np.ndarray, n_comp: int) -> list[set[int]]:
    adjacency: list[set[int]] = [set() for _ in range(n_comp)]
    a, b = comp[:, :-1], comp[:, 1:]
    for pa, pb in zip(a[a != b], b[a != b]):
        adjacency[pa].add(int(pb))
        adjacency[pb].add(int(pa))
    a, b = comp[:-1, :], comp[1:, :]
    for pa, pb in zip(a[a != b], b[a != b]):
        adjacency[pa].add(int(pb))
        adjacency[pb].add(int(pa))
    return adjacency


def _compact_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel to 0..K-1 in row-major order of first appearance."""
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    remap = np.full(int(labels.max()) + 1, -1, dtype=np.int32)
    remap[order] = np.arange(order.size, dtype=np.int32)
    return remap[labels]


# ---------------------------------------------------------------------------
# color features

def channel_features(values: np.ndarray) -> np.ndarray:
    """13 features for one channel: 8 histogram fractions, mean, population std,
    median (lower of two middles), energy, skewness (0 when std=0)."""
    values = np.asarray(values)
    if values.size == 0:
        raise ImagingError("empty region")
    n = values.size
    bins = np.bincount(np.minimum(values.astype(np.int64) // 32, 7), minlength=8)
    frac = bins / n
    mean = float(values.mean())
    std = float(values.std())
    median = float(np.sort(values.ravel())[(n - 1) // 2])
    energy = float((frac ** 2).sum())
    if std > 0:
        skew = float((((values - mean) / std) ** 3).mean())
    else:
        skew = 0.0
    return np.concatenate([frac, [mean, std, median, energy, skew]])


def region_color_features(img: np.ndarray, region_mask: np.ndarray) -> np.ndarray:
    """39-dim color descriptor of a pixel region: R block, G block, B block."""
    img = check_image(img)
    region_mask = np.asarray(region_mask, dtype=bool)
    if not region_mask.any():
        raise ImagingError("empty region")
    pixels = img[region_mask]
    return np.concatenate([channel_features(pixels[:, c]) for c in range(3)])


def scale_color_features(feat: np.ndarray) -> np.ndarray:
    """Put the 39-dim descriptor on comparable scales for similarity comparison:
    histogram fractions and energy as-is, mean/std/median / 255, skewness
    clamped to [-3,3] and / 3."""
    feat = np.asarray(feat, dtype=np.float64).copy()
    for c in range(3):
        base = 13 * c
        feat[base + 8:base + 11] /= 255.0
        feat[base + 12] = np.clip(feat[base + 12], -3.0, 3.0) / 3.0
    return feat


# ---------------------------------------------------------------------------
# hierarchical merging

def hierarchical_merge(
    img: np.ndarray,
    sp: SuperpixelMap,
    sim_threshold: float,
    target_max_nodes: int,
) -> SuperpixelMap:
    """Greedy smallest-distance-first merging of adjacent superpixels.

    Pairs closer than sim_threshold (Euclidean distance on the scaled color
    descriptor) are merged; merging continues past the threshold while the
    segment count exceeds target_max_nodes. Features of a merged region are
    recomputed from its raw pixels. Ties break toward the smaller label pair.
    """
    img = check_image(img)
    labels = sp.labels.copy()
    k = sp.num_segments

    pixel_values = [img[labels == i] for i in range(k)]  # (n_i, 3) uint8 each
    feats = {i: _scaled_features(pixel_values[i]) for i in range(k)}
    adjacency = _label_adjacency(labels, k)
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    alive = set(range(k))
    while len(alive) > 1:
        best = None
        for a in sorted(alive):
            for b in sorted(adjacency[a]):
                if b <= a:
                    continue
                d = float(np.linalg.norm(feats[a] - feats[b]))
                if best is None or d < best[0] - 1e-15 or (abs(d - best[0]) <= 1e-15 and (a, b) < best[1:]):
                    best = (d, a, b)
        if best is None:
            break
        d, a, b = best
        if not (len(alive) > target_max_nodes or d < sim_threshold):
            break
        # merge b into a
        parent[b] = a
        alive.discard(b)
        pixel_values[a] = np.concatenate([pixel_values[a], pixel_values[b]])
        feats[a] = _scaled_features(pixel_values[a])
        del feats[b]
        adjacency[a] |= adjacency[b]
        adjacency[a].discard(a)
        adjacency[a].discard(b)
        for c in adjacency[b]:
            if c != a:
                adjacency[c].discard(b)
                adjacency[c].add(a)
        adjacency[b] = set()

    root = np.array([find(i) for i in range(k)], dtype=np.int32)
    merged = root[labels]
    compact = _compact_labels(merged)
    return SuperpixelMap(labels=compact, num_segments=int(compact.max()) + 1)


def _scaled_features(pixels: np.ndarray) -> np.ndarray:
    raw = np.concatenate([channel_features(pixels[:, c]) for c in range(3)])
    return scale_color_features(raw)


def _label_adjacency(labels: np.ndarray, k: int) -> list[set[int]]:
    adjacency: list[set[int]] = [set() for _ in range(k)]
    a, b = labels[:, :-1], labels[:, 1:]
    diff = a != b
    for pa, pb in zip(a[diff], b[diff]):
        adjacency[pa].add(int(pb))
        adjacency[pb].add(int(pa))
    a, b = labels[:-1, :], labels[1:, :]
    diff = a != b
    for pa, pb in zip(a[diff], b[diff]):
        adjacency[pa].add(int(pb))
        adjacency[pb].add(int(pa))
    return adjacency
