"""Core domain types and dataset manifest ingestion.

A manifest is a UTF-8 CSV with the header ``path,label,mask_path``.  Relative
paths are resolved against the manifest's own directory; ``mask_path`` may be
empty.  Masks are 8-bit grayscale images whose foreground is every value
>= 128.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

MANIFEST_HEADER = ("path", "label", "mask_path")

# ImageNet channel statistics, the convention of the pretrained ViT backbones.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    """Raised for unreadable or malformed manifests."""


class ImageDecodeError(ValueError):
    """Raised when an image or mask file cannot be decoded."""


@dataclass(frozen=True)
class BoundingBox:
    """Integer pixel box, half-open: ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinates {self.as_tuple()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def within(self, height: int, width: int) -> bool:
        return self.x_max <= width and self.y_max <= height

    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)


@dataclass(frozen=True)
class PatchGrid:
    """Row-major tiling of an ``height x width`` image into ``p x p`` patches."""

    height: int
    width: int
    patch_size: int

    def __post_init__(self) -> None:
        p = self.patch_size
        if p <= 0 or self.height <= 0 or self.width <= 0:
            raise ValueError(f"invalid grid geometry {self.height}x{self.width}, p={p}")
        if self.height % p or self.width % p:
            raise ValueError(
                f"patch size {p} does not divide image size {self.height}x{self.width}"
            )

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def box(self, index: int) -> BoundingBox:
        if not 0 <= index < self.count:
            raise IndexError(f"patch index {index} out of range [0, {self.count})")
        row, col = divmod(index, self.cols)
        p = self.patch_size
        return BoundingBox(col * p, row * p, (col + 1) * p, (row + 1) * p)

    def index_at(self, x: float, y: float) -> int:
        """Index of the patch containing pixel coordinate ``(x, y)``."""
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"point ({x}, {y}) outside {self.width}x{self.height} image")
        p = self.patch_size
        return int(y // p) * self.cols + int(x // p)

    def boxes(self) -> Iterator[BoundingBox]:
        for i in range(self.count):
            yield self.box(i)


@dataclass(frozen=True)
class Normalization:
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def __post_init__(self) -> None:
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std must have the same length")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        """Map ``[0, 1]`` pixels (H x W x C) to normalized space."""
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return ((pixels - mean) / std).astype(np.float32)

    def invert(self, pixels: np.ndarray) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=np.float32)
        std = np.asarray(self.std, dtype=np.float32)
        return (pixels * std + mean).astype(np.float32)

    @classmethod
    def from_image(cls, pixels: np.ndarray) -> "Normalization":
        """Statistics of one ``[0, 1]`` image, per channel."""
        flat = pixels.reshape(-1, pixels.shape[-1]).astype(np.float64)
        std = np.maximum(flat.std(axis=0), 1e-8)
        return cls(tuple(flat.mean(axis=0).tolist()), tuple(std.tolist()))


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ImageSample:
    """One normalized image (H x W x C) with its image-level label.

    ``original_size`` is the ``(height, width)`` of the image before resizing;
    inference uses it to map patch boxes back into crop coordinates.
    """

    id: str
    pixels: np.ndarray
    label: int
    mask: np.ndarray | None = None
    source_path: str = ""
    original_size: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be H x W x C, got shape {self.pixels.shape}")
        h, w, c = self.pixels.shape
        if h <= 0 or w <= 0 or c not in (1, 3):
            raise ValueError(f"invalid pixel shape {self.pixels.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.mask is not None:
            if self.mask.shape != (h, w):
                raise ValueError(f"mask shape {self.mask.shape} does not match pixels {h}x{w}")
            object.__setattr__(self, "mask", _readonly(self.mask.astype(bool, copy=True)))
        object.__setattr__(self, "pixels", _readonly(np.array(self.pixels, copy=True)))
        if self.original_size is None:
            object.__setattr__(self, "original_size", (h, w))

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: int
    mask_path: Path | None = None

    @property
    def id(self) -> str:
        return self.path.stem


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    class_counts: tuple[int, int] = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        seen: set[Path] = set()
        for e in self.entries:
            if e.path in seen:
                raise ManifestError(f"duplicate path {e.path}")
            seen.add(e.path)
        n_pos = sum(e.label for e in self.entries)
        object.__setattr__(self, "class_counts", (len(self.entries) - n_pos, n_pos))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    def subset(self, indices: Sequence[int]) -> "DatasetManifest":
        return DatasetManifest(tuple(self.entries[i] for i in indices))


def _resolve(base: Path, raw: str) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else (base / p)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError("empty manifest")
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(
                f"manifest header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}"
            )
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (2, 3):
                raise ManifestError(f"row {row_no}: expected 2 or 3 columns, got {len(row)}")
            raw_path, raw_label = row[0].strip(), row[1].strip()
            raw_mask = row[2].strip() if len(row) == 3 else ""
            if not raw_path:
                raise ManifestError(f"row {row_no}: empty path")
            try:
                label = int(raw_label)
            except ValueError:
                raise ManifestError(f"row {row_no}: label {raw_label!r} is not an integer") from None
            if label not in (0, 1):
                raise ManifestError(f"row {row_no}: label {label} outside {{0,1}}")
            entries.append(
                ManifestEntry(
                    _resolve(base, raw_path),
                    label,
                    _resolve(base, raw_mask) if raw_mask else None,
                )
            )
    if not entries:
        raise ManifestError("empty manifest")
    try:
        return DatasetManifest(tuple(entries))
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def _relative_to(path: Path, base: Path) -> str:
    try:
        return path.relative_to(base).as_posix()
    except ValueError:
        return str(path)


def save_manifest(manifest: DatasetManifest | Sequence[ManifestEntry], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest:
            mask = _relative_to(e.mask_path, base) if e.mask_path is not None else ""
            writer.writerow([_relative_to(e.path, base), e.label, mask])
    return path


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    """Decode an image file to uint8 H x W x 3 (grayscale is replicated)."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path: str | os.PathLike) -> np.ndarray:
    """Decode an 8-bit mask file; foreground is value >= 128."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L")) >= 128
    except FileNotFoundError:
        raise
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode mask {path}: {exc}") from exc


def write_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def resize_rgb(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a uint8 H x W x 3 array to ``size = (H, W)``."""
    if pixels.shape[:2] == tuple(size):
        return pixels
    img = Image.fromarray(pixels)
    return np.asarray(img.resize((size[1], size[0]), Image.Resampling.BILINEAR))


def resize_float(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a float H x W x C array, channel by channel."""
    if pixels.shape[:2] == tuple(size):
        return pixels.astype(np.float32)
    channels = [
        np.asarray(
            Image.fromarray(pixels[..., c].astype(np.float32), mode="F").resize(
                (size[1], size[0]), Image.Resampling.BILINEAR
            )
        )
        for c in range(pixels.shape[-1])
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of a boolean mask."""
    if mask.shape == tuple(size):
        return mask.astype(bool)
    img = Image.fromarray(mask.astype(np.uint8) * 255, mode="L")
    return np.asarray(img.resize((size[1], size[0]), Image.Resampling.NEAREST)) >= 128


def load_sample(
    entry: ManifestEntry,
    target_size: tuple[int, int] = (224, 224),
    normalization: Normalization | None = None,
    mask_background: bool = True,
) -> ImageSample:
    """Decode, resize and normalize one manifest entry.

    When the entry names a mask, pixels outside it are set to 0 in normalized
    space so that stored crops and freshly extracted ones look alike.
    """
    normalization = normalization or Normalization()
    raw = read_rgb(entry.path)
    original_size = raw.shape[:2]
    pixels = normalization.apply(resize_rgb(raw, target_size).astype(np.float32) / 255.0)
    mask = None
    if entry.mask_path is not None:
        if not Path(entry.mask_path).is_file():
            raise FileNotFoundError(f"mask file named in manifest is missing: {entry.mask_path}")
        mask = resize_mask(read_mask(entry.mask_path), target_size)
        if mask_background:
            pixels = np.where(mask[..., None], pixels, np.float32(0.0))
    return ImageSample(
        id=entry.id,
        pixels=pixels,
        label=entry.label,
        mask=mask,
        source_path=str(entry.path),
        original_size=(int(original_size[0]), int(original_size[1])),
    )
