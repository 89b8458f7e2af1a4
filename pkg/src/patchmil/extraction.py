"""Tongue foreground extraction geometry and the edge band used at inference.

Detection and segmentation models are reached only through the small
adapter protocols below.  The file-based stubs read precomputed results from
sidecar files next to each image::

    <stem>.box.txt    one line: x_min y_min x_max y_max confidence
    <stem>.mask.png   8-bit grayscale, foreground >= 128
"""

from __future__ import annotations

import importlib
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np
from scipy import ndimage

from .data import (
    BoundingBox,
    ImageSample,
    Normalization,
    PatchGrid,
    read_mask,
    resize_float,
    resize_mask,
)

DEFAULT_BAND_WIDTH = 12
DEFAULT_OVERLAP_THRESHOLD = 0.25
DEFAULT_CONFIDENCE_FLOOR = 0.5


class ExtractionError(RuntimeError):
    """Raised when a tongue cannot be extracted from an image."""


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float


@dataclass(frozen=True)
class EdgeBand:
    bits: np.ndarray
    band_width: int

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@runtime_checkable
class DetectorAdapter(Protocol):
    thread_safe: bool

    def detect(self, image: np.ndarray, source: Path | None = None) -> Detection: ...


@runtime_checkable
class SegmenterAdapter(Protocol):
    thread_safe: bool

    def segment(
        self, image: np.ndarray, box_prompt: BoundingBox, source: Path | None = None
    ) -> np.ndarray: ...


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise ExtractionError("empty mask")
    return mask


def apply_mask(pixels: np.ndarray, mask: np.ndarray, fill_value: float = 0.0) -> np.ndarray:
    """Keep pixels under the mask, replace everything else with ``fill_value``."""
    mask = _check_mask(mask)
    if pixels.shape[:2] != mask.shape:
        raise ValueError(f"image {pixels.shape[:2]} and mask {mask.shape} dimensions differ")
    fill = np.asarray(fill_value, dtype=pixels.dtype)
    keep = mask[..., None] if pixels.ndim == 3 else mask
    return np.where(keep, pixels, fill)


def mask_bbox(mask: np.ndarray, margin: int = 0) -> BoundingBox:
    """Tight box around the mask, grown by ``margin`` and clipped to the image."""
    mask = _check_mask(mask)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    ys = np.flatnonzero(mask.any(axis=1))
    xs = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return BoundingBox(
        max(int(xs[0]) - margin, 0),
        max(int(ys[0]) - margin, 0),
        min(int(xs[-1]) + 1 + margin, w),
        min(int(ys[-1]) + 1 + margin, h),
    )


def crop_to_mask(
    pixels: np.ndarray, mask: np.ndarray, margin: int = 0
) -> tuple[np.ndarray, np.ndarray, BoundingBox]:
    """Crop image and mask identically to the (margin-grown) mask bounding box."""
    mask = _check_mask(mask)
    if pixels.shape[:2] != mask.shape:
        raise ValueError(f"image {pixels.shape[:2]} and mask {mask.shape} dimensions differ")
    box = mask_bbox(mask, margin)
    rows = slice(box.y_min, box.y_max)
    cols = slice(box.x_min, box.x_max)
    return pixels[rows, cols].copy(), mask[rows, cols].copy(), box


def erode(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary erosion by a (2k+1) x (2k+1) square; outside the image counts as background."""
    if k <= 0:
        return np.asarray(mask, dtype=bool).copy()
    return ndimage.minimum_filter(
        np.asarray(mask, dtype=np.uint8), size=2 * k + 1, mode="constant", cval=0
    ).astype(bool)


def edge_band(mask: np.ndarray, k: int = DEFAULT_BAND_WIDTH) -> EdgeBand:
    """Rim of the mask: pixels of ``mask`` removed by an erosion of radius ``k``."""
    mask = _check_mask(mask)
    if k < 1:
        raise ValueError(f"band width must be >= 1, got {k}")
    return EdgeBand(mask & ~erode(mask, k), k)


def patch_edge_mask(
    band: EdgeBand | np.ndarray,
    grid: PatchGrid,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> np.ndarray:
    """Boolean vector over patches: True where the band covers enough of the patch.

    A patch qualifies when its band fraction is >= ``overlap_threshold`` and
    strictly positive, so a threshold of 0 selects exactly the patches that
    touch the band.
    """
    bits = band.bits if isinstance(band, EdgeBand) else np.asarray(band, dtype=bool)
    if bits.shape != (grid.height, grid.width):
        raise ValueError(f"band shape {bits.shape} does not match grid {grid.height}x{grid.width}")
    if not 0.0 <= overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must lie in [0, 1]")
    p = grid.patch_size
    counts = bits.reshape(grid.rows, p, grid.cols, p).sum(axis=(1, 3)).reshape(-1)
    fraction = counts / float(p * p)
    return (fraction >= overlap_threshold) & (counts > 0)


def sample_patch_mask(
    sample: ImageSample,
    patch_size: int,
    band_width: int = DEFAULT_BAND_WIDTH,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
) -> np.ndarray:
    """Edge-band patch mask of a sample; samples without a tongue mask get all-True."""
    h, w = sample.size
    grid = PatchGrid(h, w, patch_size)
    if sample.mask is None or not sample.mask.any():
        return np.ones(grid.count, dtype=bool)
    return patch_edge_mask(edge_band(sample.mask, band_width), grid, overlap_threshold)


# --- adapters -----------------------------------------------------------------


def _sidecar(source: Path, suffix: str) -> Path:
    source = Path(source)
    by_stem = source.with_name(source.stem + suffix)
    if by_stem.exists():
        return by_stem
    by_name = source.with_name(source.name + suffix)
    return by_name if by_name.exists() else by_stem


class StubDetector:
    """Reads ``<stem>.box.txt`` next to the source image."""

    thread_safe = True

    def detect(self, image: np.ndarray, source: Path | None = None) -> Detection:
        if source is None:
            raise ExtractionError("stub detector needs the source image path")
        path = _sidecar(source, ".box.txt")
        if not path.is_file():
            raise ExtractionError(f"no tongue detected: missing {path.name}")
        fields = path.read_text(encoding="utf-8").split()
        if len(fields) != 5:
            raise ExtractionError(f"{path}: expected 'x_min y_min x_max y_max confidence'")
        x0, y0, x1, y1 = (int(round(float(v))) for v in fields[:4])
        h, w = image.shape[:2]
        box = BoundingBox(max(x0, 0), max(y0, 0), min(x1, w), min(y1, h))
        return Detection(box, float(fields[4]))


class StubSegmenter:
    """Reads ``<stem>.mask.png`` next to the source image."""

    thread_safe = True

    def segment(
        self, image: np.ndarray, box_prompt: BoundingBox, source: Path | None = None
    ) -> np.ndarray:
        if source is None:
            raise ExtractionError("stub segmenter needs the source image path")
        path = _sidecar(source, ".mask.png")
        if not path.is_file():
            raise ExtractionError(f"empty segmentation: missing {path.name}")
        mask = read_mask(path)
        if mask.shape != image.shape[:2]:
            mask = resize_mask(mask, image.shape[:2])
        return mask


class StaticDetector:
    """Returns a fixed detection; ``None`` box means the whole image."""

    thread_safe = True

    def __init__(self, box: BoundingBox | None = None, confidence: float = 1.0):
        self.box = box
        self.confidence = confidence

    def detect(self, image: np.ndarray, source: Path | None = None) -> Detection:
        h, w = image.shape[:2]
        return Detection(self.box or BoundingBox(0, 0, w, h), self.confidence)


class StaticSegmenter:
    """Returns a fixed mask; ``None`` means everything is foreground."""

    thread_safe = True

    def __init__(self, mask: np.ndarray | None = None):
        self.mask = mask

    def segment(
        self, image: np.ndarray, box_prompt: BoundingBox, source: Path | None = None
    ) -> np.ndarray:
        if self.mask is None:
            return np.ones(image.shape[:2], dtype=bool)
        return np.asarray(self.mask, dtype=bool)


class _Serialized:
    """Wraps a non-thread-safe adapter so concurrent callers take turns."""

    thread_safe = True

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()

    def detect(self, *args, **kwargs):
        with self._lock:
            return self._inner.detect(*args, **kwargs)

    def segment(self, *args, **kwargs):
        with self._lock:
            return self._inner.segment(*args, **kwargs)


def serialized(adapter):
    return adapter if getattr(adapter, "thread_safe", False) else _Serialized(adapter)


def load_adapter(spec: str, **kwargs):
    """Instantiate an external adapter from ``"package.module:factory"``."""
    module_name, sep, attr = spec.partition(":")
    if not sep or not attr:
        raise ValueError(f"adapter spec must look like 'module:factory', got {spec!r}")
    factory = getattr(importlib.import_module(module_name), attr)
    return factory(**kwargs)


# --- pipeline -----------------------------------------------------------------


def extract_crop(
    image: np.ndarray,
    detector: DetectorAdapter,
    segmenter: SegmenterAdapter,
    margin: int = 0,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    fill_value: float = 0.0,
    source: Path | None = None,
) -> tuple[np.ndarray, np.ndarray, Detection, BoundingBox]:
    """Detect, segment with the box prompt, mask out the background and crop.

    Returns the cropped pixels, the cropped mask, the detection and the crop
    box in source-image coordinates.
    """
    detection = detector.detect(image, source=source)
    if detection.confidence < confidence_floor:
        raise ExtractionError(
            f"no tongue detected (confidence {detection.confidence:.3f} < {confidence_floor})"
        )
    if not detection.box.within(*image.shape[:2]):
        raise ExtractionError(f"detector box {detection.box.as_tuple()} outside image")
    mask = np.asarray(segmenter.segment(image, detection.box, source=source), dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ExtractionError(f"segmenter mask {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        raise ExtractionError("empty segmentation")
    masked = apply_mask(image, mask, fill_value)
    crop, crop_mask, box = crop_to_mask(masked, mask, margin)
    return crop, crop_mask, detection, box


def extract_pipeline(
    image: np.ndarray,
    detector: DetectorAdapter,
    segmenter: SegmenterAdapter,
    margin: int = 0,
    target_size: tuple[int, int] = (224, 224),
    normalization: Normalization | None = None,
    confidence_floor: float = DEFAULT_CONFIDENCE_FLOOR,
    label: int = 0,
    sample_id: str = "",
    source: Path | None = None,
) -> ImageSample:
    """Full stage-one path from a uint8 RGB image to a normalized tongue sample.

    Normalization happens before masking so the background is exactly 0 in
    normalized space.
    """
    normalization = normalization or Normalization()
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    normalized = normalization.apply(image.astype(np.float32) / 255.0)
    crop, crop_mask, _, _ = extract_crop(
        normalized,
        detector,
        segmenter,
        margin=margin,
        confidence_floor=confidence_floor,
        fill_value=0.0,
        source=source,
    )
    pixels = resize_float(crop, target_size)
    mask = resize_mask(crop_mask, target_size)
    pixels = np.where(mask[..., None], pixels, np.float32(0.0))
    return ImageSample(
        id=sample_id or (Path(source).stem if source else "sample"),
        pixels=pixels,
        label=label,
        mask=mask,
        source_path=str(source or ""),
        original_size=crop.shape[:2],
    )
