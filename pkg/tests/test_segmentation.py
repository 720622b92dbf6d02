import numpy as np
import pytest

from regionfuse.engine import DiffusionEngine, UNetConfig
from regionfuse.errors import NoCellAboveThreshold
from regionfuse.fixtures import (planted_fixture_suite, planted_map,
                                 stacked_region_boxes, toy_reference,
                                 word_fixture_from_regions)
from regionfuse.pipeline import mask_iou
from regionfuse.segmentation import RegionBox, segment_reference, threshold_box
from regionfuse.text import parse_region_prompts
from tests.conftest import ANNOTATIONS, FULL_PROMPT


class TestRegionBox:
    def test_validation(self):
        with pytest.raises(ValueError):
            RegionBox(x1=3, x2=2, y1=1, y2=1)
        with pytest.raises(ValueError):
            RegionBox(x1=0, x2=2, y1=1, y2=1)

    def test_scaling(self):
        box = RegionBox(x1=2, x2=3, y1=1, y2=4)
        scaled = box.scaled(4)
        assert (scaled.x1, scaled.x2, scaled.y1, scaled.y2) == (5, 12, 1, 16)

    def test_mask_and_slices(self):
        box = RegionBox(x1=2, x2=3, y1=1, y2=2)
        mask = box.to_mask(4, 4)
        assert mask.sum() == 4
        assert mask[0, 1] == 1.0 and mask[1, 2] == 1.0 and mask[0, 0] == 0.0


class TestThresholdBox:
    def test_corner_block_example(self):
        # 0.9 on the top-left 2x2 block, 0.1 elsewhere, threshold 0.8
        values = np.full((4, 4), 0.1)
        values[0:2, 0:2] = 0.9
        box = threshold_box(values, 0.8)
        assert (box.x1, box.x2, box.y1, box.y2) == (1, 2, 1, 2)
        # exhaustive scan oracle over thresholded cells of the normalized map
        norm = (values - values.min()) / (values.max() - values.min())
        cells = [(x, y) for y in range(4) for x in range(4) if norm[y, x] > 0.8]
        assert box.x1 == min(c[0] for c in cells) + 1
        assert box.x2 == max(c[0] for c in cells) + 1
        assert box.y1 == min(c[1] for c in cells) + 1
        assert box.y2 == max(c[1] for c in cells) + 1

    def test_uniform_map_raises(self):
        with pytest.raises(NoCellAboveThreshold):
            threshold_box(np.full((4, 4), 0.55), 0.8)

    def test_single_cell(self):
        values = np.zeros((4, 4))
        values[1, 2] = 1.0  # x = 3, y = 2 in 1-indexed coordinates
        box = threshold_box(values, 0.8)
        assert (box.x1, box.x2, box.y1, box.y2) == (3, 3, 2, 2)

    def test_box_is_tight(self, rng):
        for _ in range(20):
            values = planted_map(12, 10, stacked_region_boxes(12, 10, rng)["upper"], rng)
            box = threshold_box(values, 0.8)
            norm = (values - values.min()) / (values.max() - values.min())
            above = norm > 0.8
            ys, xs = np.nonzero(above)
            assert box.x1 == xs.min() + 1 and box.x2 == xs.max() + 1
            assert box.y1 == ys.min() + 1 and box.y2 == ys.max() + 1

    def test_affine_invariance(self, rng):
        values = rng.uniform(size=(8, 8))
        box = threshold_box(values, 0.8)
        rescaled = threshold_box(3.7 * values + 11.0, 0.8)
        assert box == rescaled

    def test_gamma_validation(self, rng):
        with pytest.raises(ValueError):
            threshold_box(rng.uniform(size=(4, 4)), 1.5)


class TestSegmentReference:
    def _engine(self, latent=12):
        return DiffusionEngine(UNetConfig(height=latent, width=latent, seed=3))

    def test_fixture_boxes_stack_vertically(self):
        latent = 12
        engine = self._engine(latent)
        spec = parse_region_prompts(FULL_PROMPT, ANNOTATIONS)
        region_maps = {label: planted_map(latent, latent, box,
                                          np.random.default_rng(1))
                       for label, box in stacked_region_boxes(latent, latent).items()}
        fixture = word_fixture_from_regions(spec, region_maps, n_words=12)
        ref = toy_reference(latent * 2, latent * 2, seed=9)
        crops, boxes = segment_reference(ref, spec, engine, patch_factor=2,
                                         seed=4, fixture=fixture)
        assert len(crops) == 3
        face, upper, lower = boxes["face"], boxes["upper"], boxes["lower"]
        assert face.y2 < upper.y1 <= upper.y2 < lower.y1  # stacked, not inverted

    def test_one_region_one_crop(self):
        engine = self._engine()
        spec = parse_region_prompts(FULL_PROMPT, [("face", "a boy")])
        ref = toy_reference(24, 24, seed=2)
        crops, boxes = segment_reference(ref, spec, engine, patch_factor=2, seed=1)
        assert len(crops) == 1 and set(boxes) == {"face"}

    def test_planted_fixture_iou(self):
        latent = 12
        engine = self._engine(latent)
        spec = parse_region_prompts(FULL_PROMPT, ANNOTATIONS)
        ref = toy_reference(latent * 2, latent * 2, seed=5)
        for maps, gt_boxes in planted_fixture_suite(5, latent, latent, seed=6):
            fixture = word_fixture_from_regions(spec, maps, n_words=12)
            _, boxes = segment_reference(ref, spec, engine, patch_factor=2,
                                         seed=4, fixture=fixture)
            for label, gt in gt_boxes.items():
                iou = mask_iou(boxes[label].to_mask(latent, latent),
                               gt.to_mask(latent, latent))
                assert iou >= 0.9

    def test_crops_lie_inside_source(self):
        latent = 12
        engine = self._engine(latent)
        spec = parse_region_prompts(FULL_PROMPT, ANNOTATIONS)
        ref = toy_reference(latent * 2, latent * 2, seed=7)
        crops, boxes = segment_reference(ref, spec, engine, patch_factor=2, seed=2)
        for crop in crops:
            box = boxes[crop.label]
            assert 1 <= box.x1 <= box.x2 <= latent
            assert 1 <= box.y1 <= box.y2 <= latent
            assert crop.pixels.shape == (box.height * 2, box.width * 2, 3)
            pixel_box = box.scaled(2)
            assert np.array_equal(crop.pixels, ref[pixel_box.slices()])

    def test_multi_step_probe_averages(self):
        latent = 12
        engine = self._engine(latent)
        spec = parse_region_prompts(FULL_PROMPT, ANNOTATIONS)
        ref = toy_reference(latent * 2, latent * 2, seed=21)
        single = segment_reference(ref, spec, engine, patch_factor=2, seed=3,
                                   t_probe=5)
        averaged = segment_reference(ref, spec, engine, patch_factor=2, seed=3,
                                     t_probe=[4, 5, 6])
        for boxes in (single[1], averaged[1]):
            assert set(boxes) == {"face", "upper", "lower"}

    def test_failed_region_is_labeled(self):
        latent = 12
        engine = self._engine(latent)
        spec = parse_region_prompts(FULL_PROMPT, ANNOTATIONS)
        flat = {label: np.full((latent, latent), 0.5)
                for label in ("face", "upper", "lower")}
        fixture = word_fixture_from_regions(spec, flat, n_words=12)
        ref = toy_reference(latent * 2, latent * 2, seed=8)
        with pytest.raises(NoCellAboveThreshold) as excinfo:
            segment_reference(ref, spec, engine, patch_factor=2, seed=4,
                              fixture=fixture)
        assert "face" in str(excinfo.value)
