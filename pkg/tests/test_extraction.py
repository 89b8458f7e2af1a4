import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from patchmil.data import ImageSample, Normalization, PatchGrid, resize_float
from patchmil.extraction import (
    ExtractionError,
    StaticDetector,
    StaticSegmenter,
    StubDetector,
    StubSegmenter,
    apply_mask,
    crop_to_mask,
    edge_band,
    erode,
    extract_crop,
    extract_pipeline,
    load_adapter,
    mask_bbox,
    patch_edge_mask,
    sample_patch_mask,
    serialized,
)

from conftest import random_blob


def brute_erode(mask, k):
    h, w = mask.shape
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if y - k < 0 or x - k < 0 or y + k >= h or x + k >= w:
                continue  # outside the image counts as background
            out[y, x] = mask[y - k : y + k + 1, x - k : x + k + 1].all()
    return out


class TestApplyMask:
    def test_all_true_identity(self, rng):
        img = rng.normal(size=(6, 7, 3))
        np.testing.assert_array_equal(apply_mask(img, np.ones((6, 7), bool)), img)

    def test_all_false_rejected(self):
        with pytest.raises(ExtractionError, match="empty mask"):
            apply_mask(np.ones((5, 5, 3)), np.zeros((5, 5), bool))

    def test_border_fill(self):
        img = np.arange(75, dtype=float).reshape(5, 5, 3) + 1
        mask = np.zeros((5, 5), bool)
        mask[1:4, 1:4] = True
        out = apply_mask(img, mask, fill_value=-1)
        for y in range(5):
            for x in range(5):
                expected = img[y, x] if mask[y, x] else np.full(3, -1.0)
                np.testing.assert_array_equal(out[y, x], expected)
        assert (out[..., 0] == -1).sum() == 16

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            apply_mask(np.ones((5, 5, 3)), np.ones((4, 5), bool))

    def test_idempotent(self, rng):
        img = rng.normal(size=(20, 20, 3))
        m = random_blob(rng, 20, 20)
        once = apply_mask(img, m)
        np.testing.assert_array_equal(apply_mask(once, m), once)


class TestCrop:
    def test_tight_box(self):
        mask = np.zeros((5, 5), bool)
        mask[2:5, 1:4] = True
        crop, cmask, box = crop_to_mask(np.ones((5, 5, 3)), mask, 0)
        assert crop.shape[:2] == (3, 3) and cmask.all()
        assert box.as_tuple() == (1, 2, 4, 5)

    def test_margin_clipped(self):
        mask = np.zeros((5, 5), bool)
        mask[2:5, 1:4] = True
        crop, _, box = crop_to_mask(np.ones((5, 5, 3)), mask, 10)
        assert crop.shape[:2] == (5, 5) and box.as_tuple() == (0, 0, 5, 5)

    def test_empty_mask(self):
        with pytest.raises(ExtractionError):
            crop_to_mask(np.ones((5, 5, 3)), np.zeros((5, 5), bool))

    def test_area_conservation_random_blobs(self, rng):
        for _ in range(200):
            m = random_blob(rng, 40, 50)
            img = rng.normal(size=(40, 50, 3))
            crop, cm, box = crop_to_mask(img, m, int(rng.integers(0, 6)))
            assert cm.sum() == m.sum()
            np.testing.assert_array_equal(crop, img[box.y_min : box.y_max, box.x_min : box.x_max])


class TestEdgeBand:
    def test_solid_square(self):
        mask = np.zeros((9, 9), bool)
        mask[2:7, 2:7] = True
        band = edge_band(mask, 1).bits
        assert band.sum() == 16
        assert not band[3:6, 3:6].any()

    def test_line_is_all_band(self):
        mask = np.zeros((9, 9), bool)
        mask[4, 1:8] = True
        np.testing.assert_array_equal(edge_band(mask, 1).bits, mask)

    def test_large_k_is_all_band(self, rng):
        m = random_blob(rng, 30, 30)
        np.testing.assert_array_equal(edge_band(m, 30).bits, m)

    def test_matches_brute_force(self, rng):
        for _ in range(15):
            m = random_blob(rng, 24, 24)
            k = int(rng.integers(1, 4))
            np.testing.assert_array_equal(erode(m, k), brute_erode(m, k))
            np.testing.assert_array_equal(edge_band(m, k).bits, m & ~brute_erode(m, k))

    def test_subset_and_monotone(self, rng):
        for _ in range(30):
            m = random_blob(rng, 32, 32)
            bands = [edge_band(m, k).bits for k in range(1, 6)]
            for a, b in zip(bands, bands[1:]):
                assert not (a & ~m).any()
                assert not (a & ~b).any()

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            edge_band(np.ones((4, 4), bool), 0)


class TestPatchEdgeMask:
    grid = PatchGrid(32, 32, 16)

    def test_full_band(self):
        assert patch_edge_mask(np.ones((32, 32), bool), self.grid, 1.0).all()

    def test_empty_band(self):
        assert not patch_edge_mask(np.zeros((32, 32), bool), self.grid, 0.25).any()

    def test_half_patch(self):
        band = np.zeros((32, 32), bool)
        band[16:24, 0:16] = True  # half of patch 2
        out = patch_edge_mask(band, self.grid, 0.25)
        assert out.tolist() == [False, False, True, False]

    def test_threshold_boundary(self):
        band = np.zeros((32, 32), bool)
        band[0:4, 0:16] = True  # exactly a quarter of patch 0
        assert patch_edge_mask(band, self.grid, 0.25)[0]
        assert not patch_edge_mask(band, self.grid, 0.26)[0]

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            patch_edge_mask(np.ones((30, 32), bool), self.grid)

    def test_threshold_zero_is_touching(self, rng):
        grid = PatchGrid(48, 48, 8)
        for _ in range(50):
            band = rng.random((48, 48)) < rng.uniform(0.0, 0.02)
            expected = [band[b.y_min : b.y_max, b.x_min : b.x_max].any() for b in grid.boxes()]
            assert patch_edge_mask(band, grid, 0.0).tolist() == expected

    def test_sample_without_mask_is_all_true(self):
        s = ImageSample("a", np.zeros((32, 32, 3), np.float32), 0)
        assert sample_patch_mask(s, 16).all()


def _write_sidecars(folder, name, image, box, confidence, mask):
    Image.fromarray(image).save(folder / f"{name}.png")
    (folder / f"{name}.box.txt").write_text(" ".join(map(str, [*box, confidence])) + "\n")
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(folder / f"{name}.mask.png")


def _disk(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


class TestPipeline:
    def test_disk_crop_bounded_by_bbox_plus_margin(self, rng):
        img = rng.integers(0, 256, size=(60, 80, 3), dtype=np.uint8)
        disk = _disk(60, 80, 30, 40, 12)
        crop, cmask, det, box = extract_crop(img, StaticDetector(), StaticSegmenter(disk), margin=3)
        tight = mask_bbox(disk)
        assert box.as_tuple() == (tight.x_min - 3, tight.y_min - 3, tight.x_max + 3, tight.y_max + 3)
        assert cmask.sum() == disk.sum()
        assert np.all(crop[~cmask] == 0)

    def test_low_confidence(self):
        img = np.zeros((10, 10, 3), np.uint8)
        with pytest.raises(ExtractionError, match="no tongue detected"):
            extract_crop(img, StaticDetector(confidence=0.1), StaticSegmenter(), confidence_floor=0.5)

    def test_empty_segmentation(self):
        img = np.zeros((10, 10, 3), np.uint8)
        with pytest.raises(ExtractionError, match="empty segmentation"):
            extract_crop(img, StaticDetector(), StaticSegmenter(np.zeros((10, 10), bool)))

    def test_identity_stubs_resize_input(self, rng):
        img = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        norm = Normalization()
        s = extract_pipeline(img, StaticDetector(), StaticSegmenter(), target_size=(64, 64), normalization=norm)
        expected = resize_float(norm.apply(img.astype(np.float32) / 255.0), (64, 64))
        np.testing.assert_allclose(s.pixels, expected, atol=1e-5)
        assert s.mask.all() and s.original_size == (32, 32)

    def test_background_zero_in_normalized_space(self, rng):
        img = rng.integers(0, 256, size=(40, 40, 3), dtype=np.uint8)
        disk = _disk(40, 40, 20, 20, 15)
        s = extract_pipeline(img, StaticDetector(), StaticSegmenter(disk), target_size=(32, 32))
        assert np.all(s.pixels[~s.mask] == 0)

    def test_stub_sidecars(self, tmp_path, rng):
        img = rng.integers(0, 256, size=(50, 50, 3), dtype=np.uint8)
        disk = _disk(50, 50, 25, 25, 10)
        _write_sidecars(tmp_path, "t1", img, (5, 5, 45, 45), 0.9, disk)
        s = extract_pipeline(
            img, StubDetector(), StubSegmenter(), margin=0, target_size=(32, 32), source=tmp_path / "t1.png", label=1
        )
        assert s.id == "t1" and s.label == 1 and s.original_size == (21, 21)

    def test_stub_missing_sidecar(self, tmp_path):
        img = np.zeros((10, 10, 3), np.uint8)
        with pytest.raises(ExtractionError, match="no tongue detected"):
            StubDetector().detect(img, source=tmp_path / "missing.png")

    def test_serialized_wrapper_takes_turns(self):
        active, peak = [0], [0]
        lock = threading.Lock()

        class Unsafe:
            thread_safe = False

            def detect(self, image, source=None):
                with lock:
                    active[0] += 1
                    peak[0] = max(peak[0], active[0])
                threading.Event().wait(0.01)
                with lock:
                    active[0] -= 1
                return StaticDetector().detect(image)

        wrapped = serialized(Unsafe())
        img = np.zeros((4, 4, 3), np.uint8)
        threads = [threading.Thread(target=wrapped.detect, args=(img,)) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert peak[0] == 1

    def test_load_adapter(self):
        det = load_adapter("patchmil.extraction:StaticDetector", confidence=0.7)
        assert det.detect(np.zeros((4, 4, 3))).confidence == 0.7
        with pytest.raises(ValueError):
            load_adapter("no-colon")


@settings(max_examples=40, deadline=None)
@given(
    h=st.integers(4, 30),
    w=st.integers(4, 30),
    seed=st.integers(0, 2**16),
    k1=st.integers(1, 5),
    k2=st.integers(1, 5),
)
def test_band_properties(h, w, seed, k1, k2):
    m = random_blob(np.random.default_rng(seed), h, w)
    lo, hi = sorted((k1, k2))
    b_lo, b_hi = edge_band(m, lo).bits, edge_band(m, hi).bits
    assert not (b_lo & ~m).any()
    assert not (b_lo & ~b_hi).any()
