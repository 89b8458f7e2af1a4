import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import ndimage

from patchmil.data import BoundingBox, ImageSample, PatchGrid
from patchmil.encoder import TOY, AttentionRecord, box_to_patch
from patchmil.inference import (
    DetectionResult,
    OverlayStyle,
    RolloutMap,
    attention_rollout,
    detect,
    detections_from_scores,
    merge_adjacent,
    render_overlay,
    rollout_for,
    scale_box,
    write_detection_json,
)
from patchmil.model import ModelOutput

GRID = TOY.grid  # 4 x 4 patches of 16 px


class FixedScores(nn.Module):
    """Stands in for a trained model: fixed per-patch positive probabilities."""

    def __init__(self, positive, cls_positive=0.5):
        super().__init__()
        self.config = TOY
        self.dummy = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        p = torch.as_tensor(positive, dtype=torch.float64).clamp(1e-9, 1 - 1e-9)
        self.logits = torch.stack([torch.zeros_like(p), torch.log(p / (1 - p))], -1)
        c = torch.tensor(cls_positive, dtype=torch.float64)
        self.cls = torch.stack([torch.zeros(()), torch.log(c / (1 - c))])

    def forward(self, x, record_attention=False):
        b = x.shape[0]
        return ModelOutput(self.cls.expand(b, 2), self.logits.expand(b, -1, -1), [])


def _sample(mask=None, original_size=None):
    return ImageSample("t", np.zeros((64, 64, 3), np.float32), 1, mask=mask, original_size=original_size)


def _patch_mask(indices):
    m = np.zeros(GRID.count, bool)
    m[list(indices)] = True
    return m


def oracle_boxes(positive, mask, tau, decision=0.5):
    """Filtered scan: masked scores, bag decision, then every masked patch >= tau plus the argmax."""
    scores = [positive[i] if mask[i] else 0.0 for i in range(len(positive))]
    best = max((i for i in range(len(scores)) if mask[i]), key=lambda i: (scores[i], -i))
    if scores[best] < decision:
        return []
    return sorted({i for i in range(len(scores)) if mask[i] and scores[i] >= tau} | {best})


class TestDetect:
    def test_single_edge_patch(self):
        positive = np.full(16, 0.1)
        positive[4] = 0.9
        mask = _patch_mask([0, 1, 2, 3, 4, 7, 8, 11, 12, 13, 14, 15])
        r = detect(_sample(), FixedScores(positive), patch_mask=mask, tau=0.5)
        assert r.bag_label == 1 and r.bag_score == pytest.approx(0.9)
        assert [b.as_tuple() for b, _ in r.boxes] == [GRID.box(4).as_tuple()]

    def test_off_band_patch_suppressed(self):
        positive = np.full(16, 0.1)
        positive[5] = 0.99  # interior patch
        positive[1] = 0.8
        mask = _patch_mask([0, 1, 2, 3])
        r = detect(_sample(), FixedScores(positive), patch_mask=mask, tau=0.5)
        assert [box_to_patch(b, GRID) for b, _ in r.boxes] == [1]
        assert r.heatmap.reshape(-1)[5] == 0.0

    def test_only_off_band_hits_means_negative(self):
        positive = np.full(16, 0.1)
        positive[5] = 0.99
        r = detect(_sample(), FixedScores(positive), patch_mask=_patch_mask([0, 1, 2, 3]))
        assert r.bag_label == 0 and r.boxes == []

    def test_negative_bag_no_boxes(self):
        positive = np.full(16, 0.3)
        r = detect(_sample(), FixedScores(positive), patch_mask=np.ones(16, bool), tau=0.2)
        assert r.bag_label == 0 and r.boxes == []

    def test_no_edge_mask_allows_anywhere(self):
        positive = np.full(16, 0.1)
        positive[5] = 0.99
        mask = np.zeros((64, 64), bool)
        mask[8:56, 8:56] = True
        sample = _sample(mask)
        masked = detect(sample, FixedScores(positive), band_width=4)
        free = detect(sample, FixedScores(positive), use_edge_mask=False)
        assert 5 not in masked.patch_indices
        assert free.patch_indices == [5]

    def test_missing_mask_error(self):
        with pytest.raises(ValueError, match="mask"):
            detect(_sample(), FixedScores(np.full(16, 0.9)))

    def test_decision_rules(self):
        positive = np.full(16, 0.2)
        m = FixedScores(positive, cls_positive=0.8)
        assert detect(_sample(), m, patch_mask=np.ones(16, bool), rule="micm_masked").bag_label == 0
        assert detect(_sample(), m, patch_mask=np.ones(16, bool), rule="cls_head").bag_label == 1
        assert detect(_sample(), m, patch_mask=np.ones(16, bool), rule="either").bag_label == 1

    def test_matches_filtered_scan(self, rng):
        for _ in range(200):
            positive = rng.uniform(0, 1, size=16)
            mask = rng.random(16) < 0.5
            if not mask.any():
                continue
            tau = float(rng.uniform(0.3, 0.9))
            r = detect(_sample(), FixedScores(positive), patch_mask=mask, tau=tau)
            got = sorted(box_to_patch(b, GRID) for b, _ in r.boxes)
            assert got == oracle_boxes(positive, mask, tau)
            for b, s in r.boxes:  # round-trip audit
                i = box_to_patch(b, GRID)
                assert mask[i] and (s >= tau or i == r.selected_index)

    def test_mask_commutes_with_threshold(self, rng):
        for _ in range(100):
            positive = rng.uniform(0, 1, size=16)
            mask = rng.random(16) < 0.6
            tau = 0.5
            mask_then = set(np.flatnonzero(np.where(mask, positive, 0) >= tau))
            then_mask = set(np.flatnonzero(positive >= tau)) & set(np.flatnonzero(mask))
            assert mask_then == then_mask
            boxes, idx = detections_from_scores(positive, mask, GRID, 1, -1, tau)
            assert set(idx) == then_mask

    def test_boxes_mapped_to_original_crop(self):
        positive = np.full(16, 0.1)
        positive[15] = 0.9
        r = detect(_sample(original_size=(100, 150)), FixedScores(positive), patch_mask=np.ones(16, bool))
        (box, _), = r.boxes
        assert box.as_tuple() == (112, 75, 150, 100)  # 48 * 150 / 64 = 112.5, floored

    def test_scale_box_rounds_outward(self, rng):
        for _ in range(200):
            h, w = int(rng.integers(20, 400)), int(rng.integers(20, 400))
            b = GRID.box(int(rng.integers(0, 16)))
            s = scale_box(b, (64, 64), (h, w))
            sy, sx = h / 64, w / 64
            assert s.x_min <= b.x_min * sx + 1e-9 and s.x_max >= b.x_max * sx - 1e-9
            assert s.y_min <= b.y_min * sy + 1e-9 and s.y_max >= b.y_max * sy - 1e-9
            assert s.x_max <= w and s.y_max <= h

    def test_real_model_runs(self, toy_model):
        mask = np.zeros((64, 64), bool)
        mask[4:60, 6:58] = True
        r = detect(_sample(mask), toy_model, band_width=4)
        assert r.heatmap.shape == (4, 4)
        assert 0.0 <= r.bag_score <= 1.0


class TestMerge:
    def test_horizontal_pair(self):
        merged = merge_adjacent([(GRID.box(0), 0.6), (GRID.box(1), 0.8)])
        assert len(merged) == 1
        box, score = merged[0]
        assert (box.width, box.height, score) == (32, 16, 0.8)

    def test_diagonal_not_merged(self):
        assert len(merge_adjacent([(GRID.box(0), 0.6), (GRID.box(5), 0.8)])) == 2

    def test_matches_connected_components(self, rng):
        grid = PatchGrid(128, 128, 16)
        for _ in range(100):
            chosen = rng.random(grid.count) < 0.3
            if not chosen.any():
                continue
            boxes = [(grid.box(int(i)), float(rng.uniform())) for i in np.flatnonzero(chosen)]
            merged = merge_adjacent(boxes)
            labels, n = ndimage.label(chosen.reshape(grid.rows, grid.cols))
            assert len(merged) == n
            largest = np.bincount(labels.ravel())[1:].max()
            assert max(b.area for b, _ in merged) >= largest * 16 * 16
            assert max(s for _, s in merged) == max(s for _, s in boxes)

    def test_merge_flag_in_detect(self):
        positive = np.full(16, 0.1)
        positive[[0, 1]] = 0.9
        r = detect(_sample(), FixedScores(positive), patch_mask=np.ones(16, bool), merge=True)
        assert [b.as_tuple() for b, _ in r.boxes] == [(0, 0, 32, 16)]


def _stochastic(rng, n):
    a = rng.uniform(size=(n, n))
    return a / a.sum(axis=1, keepdims=True)


def rollout_oracle(layers):
    n = layers[0].shape[0]
    mats = []
    for a in layers:
        m = 0.5 * a + 0.5 * np.eye(n)
        mats.append(m / m.sum(axis=1, keepdims=True))
    r = np.eye(n)
    for m in mats:
        r = m @ r
    row = r[0, 1:]
    return row / row.max()


class TestRollout:
    def test_identity_layers_uniform(self):
        r = attention_rollout(AttentionRecord([np.eye(17)] * 3))
        assert np.all(r.values == r.values[0])

    def test_single_layer_peak(self):
        a = np.eye(17)
        a[0] = 0.0
        a[0, 1 + 7] = 1.0
        r = attention_rollout(AttentionRecord([a]))
        assert int(np.argmax(r.values)) == 7 and r.values.max() == 1.0
        assert r.grid.shape == (4, 4)

    def test_two_random_layers(self, rng):
        layers = [_stochastic(rng, 17) for _ in range(2)]
        np.testing.assert_allclose(attention_rollout(AttentionRecord(layers)).values, rollout_oracle(layers), atol=1e-10, rtol=0)

    def test_identity_layer_invariance(self, rng):
        layers = [_stochastic(rng, 17) for _ in range(3)]
        a = attention_rollout(AttentionRecord(layers)).values
        b = attention_rollout(AttentionRecord(layers + [np.eye(17)])).values
        assert np.array_equal(a, b)

    def test_non_stochastic_rejected(self):
        with pytest.raises(ValueError, match="stochastic"):
            attention_rollout(AttentionRecord([np.ones((17, 17))]))

    def test_from_model(self, toy_model):
        r = rollout_for(_sample(), toy_model)
        assert r.values.shape == (16,) and r.values.max() == pytest.approx(1.0) and (r.values >= 0).all()


def perimeter_oracle(shape, box, stroke):
    h, w = shape
    out = np.zeros(shape, bool)
    for y in range(h):
        for x in range(w):
            inside = box.x_min <= x < box.x_max and box.y_min <= y < box.y_max
            dist = min(x - box.x_min, box.x_max - 1 - x, y - box.y_min, box.y_max - 1 - y)
            out[y, x] = inside and dist < stroke
    return out


class TestRender:
    def _crop(self, rng):
        return rng.integers(0, 200, size=(48, 64, 3), dtype=np.uint8)

    def test_empty_result_identical(self, rng, tmp_path):
        crop = self._crop(rng)
        out = render_overlay(crop, DetectionResult(0, 0.1, []), tmp_path / "e.png")
        assert np.array_equal(out, crop)
        assert np.array_equal(np.asarray(Image.open(tmp_path / "e.png")), crop)

    def test_box_perimeter_only(self, rng):
        crop = self._crop(rng)
        box = BoundingBox(10, 5, 30, 25)
        style = OverlayStyle(box_color=(255, 255, 255), captions=False)
        out = render_overlay(crop, DetectionResult(1, 0.9, [(box, 0.9)]), style=style)
        changed = (out != crop).any(axis=-1)
        expected = perimeter_oracle(crop.shape[:2], box, 2)
        assert np.array_equal(changed, expected)
        assert np.all(out[expected] == 255)

    def test_captions_stay_inside_box_region(self, rng):
        crop = np.zeros((64, 64, 3), np.uint8)
        box = BoundingBox(0, 0, 48, 48)
        out = render_overlay(crop, DetectionResult(1, 0.9, [(box, 0.93)]))
        assert (out != 0).any(axis=-1)[2:46, 2:46].any()  # caption text drawn

    def test_zero_heatmap_transparent(self, rng):
        crop = self._crop(rng)
        out = render_overlay(crop, RolloutMap(np.zeros(16), (4, 4)))
        assert np.array_equal(out, crop)

    def test_heatmap_patchwise(self):
        crop = np.full((64, 64, 3), 100, np.uint8)
        values = np.linspace(0.1, 1.0, 16)
        out = render_overlay(crop, RolloutMap(values, (4, 4))).astype(int)
        for i, b in enumerate(GRID.boxes()):
            cell = out[b.y_min : b.y_max, b.x_min : b.x_max]
            assert np.all(cell == cell[0, 0])
        assert out[0, 0, 0] < out[63, 63, 0]

    def test_input_not_mutated(self, rng):
        crop = self._crop(rng)
        before = crop.copy()
        render_overlay(crop, DetectionResult(1, 0.9, [(BoundingBox(0, 0, 20, 20), 0.9)]))
        render_overlay(crop, RolloutMap(np.ones(16), (4, 4)))
        assert np.array_equal(crop, before)

    def test_detection_json(self, tmp_path):
        r = DetectionResult(1, 0.875, [(BoundingBox(1, 2, 3, 4), 0.875)])
        data = json.loads(write_detection_json(r, tmp_path / "x.det.json", "x").read_text())
        assert data["bag_label"] == 1 and data["boxes"] == [[1, 2, 3, 4, 0.875]]


@settings(max_examples=60, deadline=None)
@given(chosen=st.lists(st.booleans(), min_size=16, max_size=16))
def test_merge_covers_inputs(chosen):
    boxes = [(GRID.box(i), 0.5) for i, c in enumerate(chosen) if c]
    merged = merge_adjacent(boxes)
    for b, _ in boxes:
        assert any(
            m.x_min <= b.x_min and m.y_min <= b.y_min and m.x_max >= b.x_max and m.y_max >= b.y_max
            for m, _ in merged
        )
