"""Bag prediction, edge-masked patch boxes, attention rollout and overlays."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .data import BoundingBox, ImageSample, PatchGrid
from .encoder import AttentionRecord, sample_tensor
from .extraction import DEFAULT_BAND_WIDTH, DEFAULT_OVERLAP_THRESHOLD, sample_patch_mask
from .mil import masked_select
from .model import PatchMILModel


@dataclass
class DetectionResult:
    bag_label: int
    bag_score: float
    boxes: list[tuple[BoundingBox, float]]  # original-crop coordinates
    heatmap: np.ndarray | None = None  # rows x cols masked positive probability
    selected_index: int = -1
    patch_indices: list[int] = field(default_factory=list)  # one per box before merging

    def to_json(self, image_id: str = "") -> dict:
        return {
            "id": image_id,
            "bag_label": int(self.bag_label),
            "bag_score": float(self.bag_score),
            "boxes": [[*b.as_tuple(), float(s)] for b, s in self.boxes],
        }


@dataclass
class RolloutMap:
    values: np.ndarray  # length N, max-normalized to [0, 1]
    grid_shape: tuple[int, int]

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.grid_shape)


# --- coordinates --------------------------------------------------------------


def scale_box(box: BoundingBox, from_size: tuple[int, int], to_size: tuple[int, int]) -> BoundingBox:
    """Map a box between image sizes (H, W), rounding outward."""
    sy = to_size[0] / from_size[0]
    sx = to_size[1] / from_size[1]
    return BoundingBox(
        max(int(math.floor(box.x_min * sx + 1e-9)), 0),
        max(int(math.floor(box.y_min * sy + 1e-9)), 0),
        min(int(math.ceil(box.x_max * sx - 1e-9)), to_size[1]),
        min(int(math.ceil(box.y_max * sy - 1e-9)), to_size[0]),
    )


def merge_adjacent(boxes: Sequence[tuple[BoundingBox, float]]) -> list[tuple[BoundingBox, float]]:
    """Merge 4-connected (edge-sharing) boxes into their bounding rectangle, score = max."""
    n = len(boxes)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def touching(a: BoundingBox, b: BoundingBox) -> bool:
        share_x = min(a.x_max, b.x_max) > max(a.x_min, b.x_min)
        share_y = min(a.y_max, b.y_max) > max(a.y_min, b.y_min)
        side_x = a.x_max == b.x_min or b.x_max == a.x_min
        side_y = a.y_max == b.y_min or b.y_max == a.y_min
        return (side_x and share_y) or (side_y and share_x)

    for i in range(n):
        for j in range(i + 1, n):
            if touching(boxes[i][0], boxes[j][0]):
                parent[find(i)] = find(j)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    merged = []
    for members in sorted(groups.values(), key=min):
        bs = [boxes[i][0] for i in members]
        merged.append(
            (
                BoundingBox(
                    min(b.x_min for b in bs),
                    min(b.y_min for b in bs),
                    max(b.x_max for b in bs),
                    max(b.y_max for b in bs),
                ),
                max(boxes[i][1] for i in members),
            )
        )
    return merged


# --- detection ----------------------------------------------------------------


def detections_from_scores(
    positive_probs: np.ndarray,
    patch_mask: np.ndarray,
    grid: PatchGrid,
    bag_label: int,
    selected_index: int,
    tau: float = 0.5,
    original_size: tuple[int, int] | None = None,
    merge: bool = False,
) -> tuple[list[tuple[BoundingBox, float]], list[int]]:
    """Boxes for every masked patch scoring >= tau when the bag is positive.

    The selected patch is always part of a positive prediction.
    """
    if not bag_label:
        return [], []
    scores = np.where(patch_mask, positive_probs, 0.0)
    keep = set(np.flatnonzero(patch_mask & (scores >= tau)).tolist())
    if selected_index >= 0:
        keep.add(int(selected_index))
    indices = sorted(keep)
    boxes = [(grid.box(i), float(scores[i])) for i in indices]
    if merge:
        boxes = merge_adjacent(boxes)
    if original_size is not None and tuple(original_size) != (grid.height, grid.width):
        boxes = [(scale_box(b, (grid.height, grid.width), original_size), s) for b, s in boxes]
    return boxes, indices


@torch.no_grad()
def detect(
    sample: ImageSample,
    model: PatchMILModel,
    patch_mask: np.ndarray | None = None,
    tau: float = 0.5,
    rule: str = "micm_masked",
    use_edge_mask: bool = True,
    band_width: int = DEFAULT_BAND_WIDTH,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
    merge: bool = False,
    decision_threshold: float = 0.5,
) -> DetectionResult:
    grid = model.config.grid
    if patch_mask is None:
        if not use_edge_mask:
            patch_mask = np.ones(grid.count, dtype=bool)
        elif sample.mask is None:
            raise ValueError(f"sample {sample.id!r} has no tongue mask; disable edge masking to proceed")
        else:
            patch_mask = sample_patch_mask(sample, grid.patch_size, band_width, overlap_threshold)
    patch_mask = np.asarray(patch_mask, dtype=bool)
    if not patch_mask.any():
        patch_mask = np.ones(grid.count, dtype=bool)

    model.eval()
    dtype = next(model.parameters()).dtype
    out = model(sample_tensor(sample, dtype))
    probs = out.instance_probs[0]
    index, selected = masked_select(probs, torch.as_tensor(patch_mask))
    micm_score = float(selected)
    cls_score = float(out.cls_probs[0, 1])
    if rule == "micm_masked":
        bag_score = micm_score
    elif rule == "cls_head":
        bag_score = cls_score
    elif rule == "either":
        bag_score = max(micm_score, cls_score)
    else:
        raise ValueError(f"unknown decision rule {rule!r}")
    bag_label = int(bag_score >= decision_threshold)

    positive = probs[:, 1].cpu().numpy().astype(np.float64)
    boxes, indices = detections_from_scores(
        positive,
        patch_mask,
        grid,
        bag_label,
        int(index),
        tau=tau,
        original_size=sample.original_size,
        merge=merge,
    )
    heatmap = np.where(patch_mask, positive, 0.0).reshape(grid.rows, grid.cols)
    return DetectionResult(bag_label, bag_score, boxes, heatmap, int(index), indices)


def write_detection_json(result: DetectionResult, path: str | os.PathLike, image_id: str = "") -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_json(image_id), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# --- attention rollout --------------------------------------------------------


def attention_rollout(
    record: AttentionRecord | Sequence[np.ndarray], grid_shape: tuple[int, int] | None = None
) -> RolloutMap:
    """Class-token relevance over patches from per-layer attention.

    Each layer is mixed with the identity (0.5 A + 0.5 I) and row-normalized;
    layers are multiplied in order and the class-token row over the patch
    tokens is max-normalized.  An all-zero row stays all zero.
    """
    layers = record.layers if isinstance(record, AttentionRecord) else list(record)
    if not layers:
        raise ValueError("attention record is empty")
    n = layers[0].shape[-1]
    rollout = np.eye(n)
    for i, a in enumerate(layers):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (n, n):
            raise ValueError(f"layer {i} has shape {a.shape}, expected {(n, n)}")
        if np.any(a < 0) or not np.allclose(a.sum(axis=-1), 1.0, atol=1e-5):
            raise ValueError(f"layer {i} attention rows are not stochastic")
        mixed = 0.5 * a + 0.5 * np.eye(n)
        mixed = mixed / mixed.sum(axis=-1, keepdims=True)
        rollout = mixed @ rollout
    relevance = rollout[0, 1:]
    peak = relevance.max()
    values = relevance / peak if peak > 0 else np.zeros_like(relevance)
    if grid_shape is None:
        side = int(round(math.sqrt(n - 1)))
        grid_shape = (side, side) if side * side == n - 1 else (1, n - 1)
    return RolloutMap(values, tuple(grid_shape))


# --- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class OverlayStyle:
    box_color: tuple[int, int, int] = (255, 40, 40)
    stroke: int = 2
    captions: bool = True
    heat_color: tuple[int, int, int] = (255, 0, 0)
    max_alpha: float = 0.6


def box_perimeter(shape: tuple[int, int], box: BoundingBox, stroke: int) -> np.ndarray:
    """Pixels within ``stroke`` of the inner edge of ``box`` (clipped to ``shape``)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    inside = (xx >= box.x_min) & (xx < box.x_max) & (yy >= box.y_min) & (yy < box.y_max)
    core = (
        (xx >= box.x_min + stroke)
        & (xx < box.x_max - stroke)
        & (yy >= box.y_min + stroke)
        & (yy < box.y_max - stroke)
    )
    return inside & ~core


def _font(size: int):
    try:
        return ImageFont.load_default(size=size)
    except TypeError:
        return ImageFont.load_default()


def render_boxes(image: np.ndarray, result: DetectionResult, style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for box, _ in result.boxes:
        out[box_perimeter((h, w), box, style.stroke)] = style.box_color
    if style.captions and result.boxes:
        pil = Image.fromarray(out)
        draw = ImageDraw.Draw(pil)
        font = _font(max(8, min(h, w) // 24))
        for box, score in result.boxes:
            draw.text((box.x_min + style.stroke + 1, box.y_min + style.stroke), f"{score:.2f}", fill=style.box_color, font=font)
        out = np.asarray(pil)
    return out


def render_heatmap(image: np.ndarray, heat: np.ndarray, style: OverlayStyle = OverlayStyle()) -> np.ndarray:
    """Alpha-blend a rows x cols map over the image, one flat cell per patch."""
    h, w = image.shape[:2]
    heat = np.clip(np.asarray(heat, dtype=np.float32), 0.0, 1.0)
    up = np.asarray(Image.fromarray(heat, mode="F").resize((w, h), Image.Resampling.NEAREST))
    alpha = (style.max_alpha * up)[..., None]
    if not alpha.any():
        return np.array(image, dtype=np.uint8, copy=True)
    color = np.asarray(style.heat_color, dtype=np.float32)
    blended = (1.0 - alpha) * image.astype(np.float32) + alpha * color
    out = np.rint(blended).astype(np.uint8)
    out[up == 0] = image[up == 0]
    return out


def render_overlay(
    image: np.ndarray,
    overlay: DetectionResult | RolloutMap,
    path: str | os.PathLike | None = None,
    style: OverlayStyle = OverlayStyle(),
) -> np.ndarray:
    """Draw detections (boxes) or a rollout map (heat) on a copy of ``image``."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if isinstance(overlay, RolloutMap):
        out = render_heatmap(image, overlay.grid, style)
    else:
        out = render_boxes(image, overlay, style)
    if path is not None:
        Image.fromarray(out).save(path, format="PNG")
    return out


def rollout_for(sample: ImageSample, model: PatchMILModel) -> RolloutMap:
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(sample_tensor(sample, dtype), record_attention=True)
    grid = model.config.grid
    record = AttentionRecord([a[0].cpu().numpy() for a in out.attentions])
    return attention_rollout(record, (grid.rows, grid.cols))
