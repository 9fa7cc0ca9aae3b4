"""Synthetic dataset generator: Voronoi tissue mosaics with per-class color
distributions, ground-truth masks, and image-level labels derived from the
patterns present."""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gleason import GRADE_VALUE, PATTERN_CLASSES, GleasonLabel
from .imaging import write_image
from PIL import Image


class SynthError(ValueError):
    pass


DEFAULT_COLORS = {
    "B": (235, 205, 225),
    "G3": (110, 200, 120),
    "G4": (90, 110, 220),
    "G5": (220, 80, 80),
}

OVERLAPPING_COLORS = {
    # deliberately hard: near-identical class appearance
    "B": (180, 170, 175),
    "G3": (175, 172, 170),
    "G4": (172, 168, 178),
    "G5": (178, 174, 172),
}


@dataclass
class SyntheticSpec:
    width: int = 128
    height: int = 128
    min_regions: int = 3
    max_regions: int = 6
    class_colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    class_probs: tuple = (0.55, 0.15, 0.15, 0.15)
    noise_std: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise SynthError("image too small")
        if not (1 <= self.min_regions <= self.max_regions):
            raise SynthError("invalid region count range")
        if abs(sum(self.class_probs) - 1.0) > 1e-9:
            raise SynthError("class probabilities must sum to 1")
        colors = [tuple(self.class_colors[c]) for c in PATTERN_CLASSES]
        if len(set(colors)) < len(colors):
            warnings.warn("synthetic class colors are not pairwise distinct")


def label_from_mask(mask: np.ndarray) -> GleasonLabel:
    """Primary = highest grade present, secondary = second-highest present
    (primary when only one grade); benign-only -> (B, B)."""
    present = sorted({PATTERN_CLASSES[i] for i in np.unique(mask) if PATTERN_CLASSES[i] != "B"},
                     key=lambda c: GRADE_VALUE[c], reverse=True)
    if not present:
        return GleasonLabel("B", "B")
    primary = present[0]
    secondary = present[1] if len(present) > 1 else primary
    return GleasonLabel(primary, secondary)


def generate_sample(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, GleasonLabel]:
    """One Voronoi mosaic: image, class-index mask, derived image label."""
    h, w = spec.height, spec.width
    n_sites = int(rng.integers(spec.min_regions, spec.max_regions + 1))
    sites = np.stack([rng.uniform(0, w, n_sites), rng.uniform(0, h, n_sites)], axis=1)
    site_classes = rng.choice(len(PATTERN_CLASSES), size=n_sites, p=spec.class_probs)
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (xx[:, :, None] - sites[None, None, :, 0]) ** 2 + (yy[:, :, None] - sites[None, None, :, 1]) ** 2
    nearest = np.argmin(d2, axis=2)
    mask = site_classes[nearest].astype(np.int64)
    img = np.zeros((h, w, 3), dtype=np.float64)
    for k, cls in enumerate(PATTERN_CLASSES):
        img[mask == k] = spec.class_colors[cls]
    img += rng.normal(0, spec.noise_std, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img, mask, label_from_mask(mask)


def generate_dataset(spec: SyntheticSpec, counts: dict[str, int], out_dir: str) -> str:
    """Emit images/, masks/, and manifest.csv for the requested split sizes.

    Returns the manifest path. Mask PNGs store class indices B=0,G3=1,G4=2,G5=3.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    rows = []
    index = 0
    for split in ("train", "val", "test"):
        for _ in range(counts.get(split, 0)):
            img, mask, label = generate_sample(spec, rng)
            stem = f"{split}_{index:04d}"
            img_path = os.path.join(img_dir, stem + ".png")
            mask_path = os.path.join(mask_dir, stem + ".png")
            write_image(img, img_path)
            Image.fromarray(mask.astype(np.uint8)).save(mask_path)
            rows.append([img_path, mask_path, label.primary, label.secondary, split])
            index += 1
    manifest_path = os.path.join(out_dir, "manifest.csv")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_path", "mask_path", "primary", "secondary", "split"])
        writer.writerows(rows)
    os.replace(tmp, manifest_path)
    return manifest_path
