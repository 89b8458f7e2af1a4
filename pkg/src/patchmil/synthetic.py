"""Deterministic planted-patch dataset: blob "tongues" with dark marks on the rim.

Positive images carry 1-3 marks.  A mark darkens the edge-band pixels of one
grid patch whose band coverage passes the overlap threshold, so every mark
lies inside the edge band and its patch passes ``patch_edge_mask``.  Negative
images have no marks.  ``<id>.gt.json`` records the planted patch indices and
exists for evaluation only.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, ManifestEntry, PatchGrid, save_manifest, write_mask
from .extraction import edge_band, patch_edge_mask


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 64
    patch_size: int = 16
    n_images: int = 400
    positive_fraction: float = 0.5
    band_width: int = 4
    overlap_threshold: float = 0.25
    min_marks: int = 1
    max_marks: int = 3
    radius_range: tuple[float, float] = (0.36, 0.45)  # fraction of image size
    wobble: float = 0.06
    tongue_rgb: tuple[int, int, int] = (205, 125, 125)
    mark_rgb: tuple[int, int, int] = (95, 45, 55)
    noise_std: float = 12.0

    def __post_init__(self) -> None:
        PatchGrid(self.image_size, self.image_size, self.patch_size)
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if not 1 <= self.min_marks <= self.max_marks:
            raise ValueError("need 1 <= min_marks <= max_marks")
        if self.n_images < 1:
            raise ValueError("n_images must be >= 1")
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ValueError("radius_range must lie in (0, 0.5)")
        if self.band_width < 1:
            raise ValueError("band_width must be >= 1")
        if self.band_width * (1 + self.wobble) >= lo * self.image_size:
            raise ValueError("geometrically infeasible: edge band wider than the blob radius")
        # A mark fills the band part of one patch; the band must be able to
        # cover the required fraction of a patch.
        best_cover = min(1.0, 2 * self.band_width / self.patch_size)
        if best_cover < self.overlap_threshold:
            raise ValueError("geometrically infeasible: edge band too thin to cover a patch")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.image_size, self.image_size, self.patch_size)

    @property
    def n_positive(self) -> int:
        return int(round(self.positive_fraction * self.n_images))


@dataclass
class SyntheticDataset:
    root: Path
    manifest_path: Path
    manifest: DatasetManifest
    planted: dict[str, list[int]]


def blob_mask(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Wobbly ellipse around the image centre."""
    n = spec.image_size
    cy = n / 2 + rng.uniform(-1.5, 1.5)
    cx = n / 2 + rng.uniform(-1.5, 1.5)
    ry, rx = rng.uniform(*spec.radius_range, size=2) * n
    lobes = int(rng.integers(2, 5))
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) + 0.5
    theta = np.arctan2((yy - cy) / ry, (xx - cx) / rx)
    radius = 1.0 + spec.wobble * np.sin(lobes * theta + phase)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= radius**2


def candidate_patches(mask: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    band = edge_band(mask, spec.band_width)
    return np.flatnonzero(patch_edge_mask(band, spec.grid, spec.overlap_threshold))


def render(
    spec: SyntheticSpec, rng: np.random.Generator, n_marks: int
) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """One image, its mask and the planted patch indices (empty for negatives)."""
    n = spec.image_size
    mask = blob_mask(spec, rng)
    candidates = candidate_patches(mask, spec)
    if n_marks and candidates.size == 0:
        raise ValueError("geometrically infeasible: no rim patch reaches the overlap threshold")

    shade = rng.uniform(-15, 15, size=3)
    tongue = np.asarray(spec.tongue_rgb, dtype=np.float64) + shade
    image = np.empty((n, n, 3), dtype=np.float64)
    image[:] = rng.uniform(20, 60, size=3)  # background, removed by the mask later
    image[mask] = tongue
    image += rng.normal(0.0, spec.noise_std, size=image.shape)

    planted: list[int] = []
    if n_marks:
        k = min(n_marks, candidates.size)
        planted = sorted(int(i) for i in rng.choice(candidates, size=k, replace=False))
        band = edge_band(mask, spec.band_width).bits
        mark = np.asarray(spec.mark_rgb, dtype=np.float64)
        for idx in planted:
            box = spec.grid.box(idx)
            region = np.zeros_like(mask)
            region[box.y_min : box.y_max, box.x_min : box.x_max] = True
            where = region & band
            image[where] = mark + rng.normal(0.0, spec.noise_std, size=(int(where.sum()), 3))
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), mask, planted


def generate(spec: SyntheticSpec, seed: int, out_dir: str | os.PathLike, label_file: str = "manifest.csv") -> SyntheticDataset:
    """Write images, masks, ground truth and a manifest under ``out_dir``."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    labels = np.zeros(spec.n_images, dtype=int)
    labels[: spec.n_positive] = 1
    labels = rng.permutation(labels)

    entries = []
    planted_by_id: dict[str, list[int]] = {}
    width = max(4, len(str(spec.n_images - 1)))
    for i, label in enumerate(labels.tolist()):
        sample_id = f"syn_{i:0{width}d}"
        img_rng = np.random.default_rng([seed, i])
        n_marks = int(img_rng.integers(spec.min_marks, spec.max_marks + 1)) if label else 0
        image, mask, planted = render(spec, img_rng, n_marks)
        image_path = root / "images" / f"{sample_id}.png"
        mask_path = root / "masks" / f"{sample_id}.mask.png"
        Image.fromarray(image, mode="RGB").save(image_path)
        write_mask(mask, mask_path)
        gt = {"id": sample_id, "label": label, "planted_patches": planted}
        (root / "gt" / f"{sample_id}.gt.json").write_text(json.dumps(gt, sort_keys=True) + "\n", encoding="utf-8")
        entries.append(ManifestEntry(image_path, label, mask_path))
        planted_by_id[sample_id] = planted

    manifest = DatasetManifest(tuple(entries))
    manifest_path = save_manifest(manifest, root / label_file)
    return SyntheticDataset(root, manifest_path, manifest, planted_by_id)


def load_ground_truth(root: str | os.PathLike) -> dict[str, list[int]]:
    out = {}
    for path in sorted(Path(root, "gt").glob("*.gt.json")):
        gt = json.loads(path.read_text(encoding="utf-8"))
        out[gt["id"]] = list(gt["planted_patches"])
    return out
