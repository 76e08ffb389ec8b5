import numpy as np
import pytest

from app.detector import (
    DetectorConfig, DetectorWeights, Detection, PyramidLevels, anchor_box, apply_deltas,
    detect_heads, fpn_merge, nms, roi_align, rpn_forward, segment_image, toy_backbone,
)
from app.errors import ConfigurationError, DegenerateBoxError, ShapeError
from app.geometry import box_iou


def _pyramid(channels=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return PyramidLevels(tuple(
        (level, rng.normal(size=(channels, size >> i, size >> i)).astype(np.float32))
        for i, level in enumerate((2, 3, 4))
    ))


class TestBackbone:
    def test_zero_weights_reduce_to_pooled_shortcut(self, zero_detector):
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(32, 48)).astype(np.float32)
        levels = toy_backbone(image, zero_detector)
        assert [index for index, _ in levels.levels] == [2, 3, 4]
        expected = image
        for _, feature in levels.levels:
            expected = expected.reshape(expected.shape[0] // 2, 2, expected.shape[1] // 2, 2).max(axis=(1, 3))
            assert feature.shape == (2,) + expected.shape
            for channel in feature:
                assert np.array_equal(channel, expected)

    def test_size_must_divide_by_eight(self, zero_detector):
        with pytest.raises(ShapeError):
            toy_backbone(np.zeros((30, 32), dtype=np.float32), zero_detector)

    def test_channel_count_checked(self, zero_detector):
        with pytest.raises(ShapeError):
            toy_backbone(np.zeros((3, 32, 32), dtype=np.float32), zero_detector)


class TestFpn:
    def test_zero_laterals_give_zero_pyramid(self, zero_detector):
        merged = fpn_merge(_pyramid(), zero_detector)
        assert all(not feature.any() for _, feature in merged.levels)

    def test_identity_laterals_accumulate_top_down(self, zero_detector):
        eye = np.eye(2, dtype=np.float32).reshape(2, 2, 1, 1)
        weights = DetectorWeights(**{**zero_detector.__dict__, 'laterals': (eye, eye, eye)})
        c = _pyramid()
        p = fpn_merge(c, weights)
        p4 = c.level(4)
        p3 = c.level(3) + p4.repeat(2, axis=1).repeat(2, axis=2)
        p2 = c.level(2) + p3.repeat(2, axis=1).repeat(2, axis=2)
        assert np.array_equal(p.level(4), p4)
        assert np.allclose(p.level(3), p3, atol=1e-6)
        assert np.allclose(p.level(2), p2, atol=1e-6)

    def test_level_sizes_must_halve(self):
        with pytest.raises(ShapeError):
            PyramidLevels(((2, np.zeros((2, 8, 8), np.float32)), (3, np.zeros((2, 8, 8), np.float32))))


class TestRpn:
    def test_zero_weights_score_one_half(self, zero_detector):
        outputs = rpn_forward(_pyramid(), zero_detector)
        assert len(outputs) == 16 * 16 + 8 * 8 + 4 * 4
        assert all(o.score == 0.5 for o in outputs)
        assert all(o.decode() == o.anchor for o in outputs)

    def test_anchor_geometry(self):
        assert anchor_box(2, 0, 0) == (-3.0, -3.0, 5.0, 5.0)
        assert anchor_box(4, 2, 1) == (-4.0, 4.0, 28.0, 36.0)

    def test_apply_deltas(self):
        assert apply_deltas((0, 0, 10, 20), (0, 0, 0, 0)) == (0.0, 0.0, 10.0, 20.0)
        assert apply_deltas((0, 0, 10, 20), (0.5, 0, 0, 0)) == (5.0, 0.0, 15.0, 20.0)
        x1, y1, x2, y2 = apply_deltas((0, 0, 10, 10), (0, 0, np.log(2.0), 0))
        assert (x2 - x1) == pytest.approx(20.0)


class TestRoiAlign:
    def test_grid_aligned_box_is_verbatim(self):
        rng = np.random.default_rng(1)
        level = rng.normal(size=(3, 10, 12)).astype(np.float32)
        out = roi_align(level, (2, 3, 6, 7), 4)
        assert np.array_equal(out, level[:, 3:7, 2:6])

    def test_constant_map(self):
        level = np.full((1, 6, 6), 3.5, dtype=np.float32)
        assert np.allclose(roi_align(level, (0.3, 1.1, 4.7, 5.2), 3), 3.5)

    def test_matches_dense_bilinear_evaluation(self, dense_bilinear):
        rng = np.random.default_rng(2)
        checked = 0
        while checked < 1000:
            height, width = (int(v) for v in rng.integers(2, 9, size=2))
            level = rng.normal(size=(2, height, width)).astype(np.float32)
            x1, x2 = sorted(rng.uniform(-1, width + 1, size=2))
            y1, y2 = sorted(rng.uniform(-1, height + 1, size=2))
            cx1, cx2 = max(x1, 0.0), min(x2, float(width))
            cy1, cy2 = max(y1, 0.0), min(y2, float(height))
            if cx2 - cx1 < 1e-3 or cy2 - cy1 < 1e-3:
                continue
            checked += 1
            out = int(rng.integers(1, 5))
            result = roi_align(level, (x1, y1, x2, y2), out)
            for i in range(out):
                for j in range(out):
                    gx = min(max(cx1 + (j + 0.5) * (cx2 - cx1) / out - 0.5, 0.0), width - 1)
                    gy = min(max(cy1 + (i + 0.5) * (cy2 - cy1) / out - 0.5, 0.0), height - 1)
                    for c in range(2):
                        assert abs(result[c, i, j] - dense_bilinear(level[c], gx, gy)) < 1e-6


    def test_degenerate_box(self):
        with pytest.raises(DegenerateBoxError):
            roi_align(np.zeros((1, 4, 4), np.float32), (1, 1, 1, 3), 2)
        with pytest.raises(DegenerateBoxError):
            roi_align(np.zeros((1, 4, 4), np.float32), (5, 0, 9, 3), 2)


def test_heads_with_mask_bias(zero_detector):
    weights = DetectorWeights(**{**zero_detector.__dict__, 'b_m': np.array([10.0], np.float32)})
    detection = detect_heads(np.zeros((2, 8, 8), np.float32), weights, proposal=(1, 2, 9, 6))
    assert detection.score == 0.5
    assert detection.box == (1.0, 2.0, 9.0, 6.0)
    assert detection.mask.shape == (8, 8) and detection.mask.all()


class TestNms:
    def _det(self, score, box):
        return Detection(score=score, box=box, mask=np.ones((2, 2), bool))

    def test_suppresses_overlaps_and_keeps_disjoint(self):
        kept = nms([
            self._det(0.6, (0, 0, 10, 10)),
            self._det(0.9, (1, 0, 11, 10)),
            self._det(0.8, (50, 50, 60, 60)),
        ], 0.5)
        assert [d.score for d in kept] == [0.9, 0.8]

    def test_equal_scores_keep_upper_left(self):
        kept = nms([self._det(0.7, (2, 2, 12, 12)), self._det(0.7, (1, 1, 11, 11))], 0.5)
        assert [d.box for d in kept] == [(1, 1, 11, 11)]

    def test_threshold_range(self):
        with pytest.raises(ConfigurationError):
            nms([], 1.0)


class TestSegmentImage:
    def test_zero_weights_detect_nothing(self, zero_detector, band_image):
        assert segment_image(band_image, zero_detector, DetectorConfig()) == []

    def test_band_oracle(self, band_detector, band_image):
        detections = segment_image(band_image, band_detector, DetectorConfig())
        assert len(detections) == 1
        detection = detections[0]
        assert box_iou(detection.box, (0, 16, 64, 24)) > 0.999
        assert detection.mask.all()
        pasted = detection.paste_mask(64, 64)
        assert pasted.sum() == 8 * 64
        assert pasted[16:24].all()

    def test_record(self, band_detector, band_image):
        record = segment_image(band_image, band_detector, DetectorConfig())[0].to_record()
        assert set(record) == {'score', 'box', 'mask_rle'}
        assert record['mask_rle']['size'] == [8, 8]

    def test_deterministic(self, band_detector, band_image):
        first = segment_image(band_image, band_detector, DetectorConfig())
        second = segment_image(band_image, band_detector, DetectorConfig())
        assert [d.box for d in first] == [d.box for d in second]


def test_weights_round_trip_through_tensor_names(band_detector):
    rebuilt = DetectorWeights.from_tensors(band_detector.to_tensors())
    for name, tensor in band_detector.to_tensors().items():
        assert np.array_equal(rebuilt.to_tensors()[name], tensor)


def test_missing_tensor_named(band_detector):
    tensors = band_detector.to_tensors()
    del tensors['heads.w_m']
    with pytest.raises(ShapeError, match='heads.w_m'):
        DetectorWeights.from_tensors(tensors)
