import numpy as np
import pytest

from regionfuse.adapters import (binarize_mask, fuse_region_outputs,
                                 masked_region_attention, region_embedding,
                                 RegionAdapterOutput, RegionMask,
                                 soft_region_attention)
from regionfuse.engine import DiffusionEngine, UNetConfig
from regionfuse.errors import MissingRegionFeatures, ShapeMismatch


def entry_for(engine, label="face", features=None, char=1, rng=None):
    if features is None:
        features = rng.normal(size=(4, 32))
    bundle = engine.build_bundle({(char, label): features})
    return bundle.entries[0]


@pytest.fixture()
def engine():
    return DiffusionEngine(UNetConfig(height=8, width=8, seed=4))


class TestBinarizeMask:
    def test_threshold_branches(self):
        mask = binarize_mask(np.array([[0.9, 0.8]]), gamma2=0.8)
        assert mask.mode == "hard"
        assert mask.values[0, 0] == 1.0  # strictly above
        assert mask.values[0, 1] == 0.0  # exactly at the threshold

    def test_all_zero_map(self):
        mask = binarize_mask(np.zeros((3, 3)), gamma2=0.8)
        assert np.array_equal(mask.values, np.zeros((3, 3)))

    def test_matches_per_cell_compare_oracle(self, rng):
        values = rng.uniform(size=(8, 8))
        mask = binarize_mask(values, gamma2=0.8)
        for y in range(8):
            for x in range(8):
                assert mask.values[y, x] == (1.0 if values[y, x] > 0.8 else 0.0)


class TestMaskedRegionAttention:
    def test_all_ones_mask_is_identity(self, rng):
        values = rng.uniform(size=(4, 4))
        mask = RegionMask(label="r", mode="hard", values=np.ones((4, 4)))
        assert np.array_equal(masked_region_attention(values, mask), values)

    def test_all_zero_mask_zeroes(self, rng):
        values = rng.uniform(size=(4, 4))
        mask = RegionMask(label="r", mode="hard", values=np.zeros((4, 4)))
        assert np.array_equal(masked_region_attention(values, mask), np.zeros((4, 4)))

    def test_product_example(self):
        values = np.array([[0.2, 0.6], [0.4, 0.8]])
        mask = RegionMask(label="r", mode="hard", values=np.array([[1.0, 0.0],
                                                                   [0.0, 1.0]]))
        assert np.array_equal(masked_region_attention(values, mask),
                              [[0.2, 0.0], [0.0, 0.8]])

    def test_shape_mismatch(self):
        mask = RegionMask(label="r", mode="hard", values=np.ones((2, 2)))
        with pytest.raises(ShapeMismatch):
            masked_region_attention(np.ones((3, 3)), mask)


class TestSoftRegionAttention:
    def test_identity(self, rng):
        values = rng.uniform(size=(5, 5))
        assert np.array_equal(soft_region_attention(values), values)

    def test_binary_map_equals_hard_path(self, rng):
        binary = (rng.uniform(size=(6, 6)) > 0.5).astype(np.float64)
        for gamma2 in (0.1, 0.5, 0.8):
            hard = masked_region_attention(binary, binarize_mask(binary, gamma2))
            assert np.array_equal(soft_region_attention(binary), hard)

    def test_graded_map_differs_below_threshold(self, rng):
        values = rng.uniform(size=(8, 8))
        hard = masked_region_attention(values, binarize_mask(values, 0.8))
        soft = soft_region_attention(values)
        below = values <= 0.8
        nonzero_below = below & (values > 0)
        assert np.any(nonzero_below)
        assert np.all(hard[below] == 0.0)
        assert np.array_equal(soft[nonzero_below], values[nonzero_below])
        assert np.array_equal(soft[~below], hard[~below])


class TestRegionEmbedding:
    def test_zero_weighting_zero_embedding(self, engine, rng):
        entry = entry_for(engine, rng=rng)
        out = region_embedding(np.zeros((8, 8)), entry, layer=1)
        assert np.array_equal(out.values, np.zeros_like(out.values))

    def test_zero_features_zero_embedding(self, engine, rng):
        entry = entry_for(engine, features=np.zeros((4, 32)))
        out = region_embedding(np.abs(rng.uniform(size=(8, 8))), entry, layer=1)
        assert np.array_equal(out.values, np.zeros_like(out.values))

    def test_outer_product_oracle(self, engine, rng):
        features = rng.normal(size=(1, 32))  # a single feature token
        entry = entry_for(engine, features=features)
        weighting = np.abs(rng.uniform(size=(2, 2)))
        out = region_embedding(weighting, entry, layer=2)
        pooled = (features @ entry.value_proj(2))[0]
        for y in range(2):
            for x in range(2):
                assert np.allclose(out.values[y, x], weighting[y, x] * pooled)

    def test_exact_zero_outside_support(self, engine, rng):
        entry = entry_for(engine, rng=rng)
        weighting = np.zeros((8, 8))
        weighting[:4, :4] = rng.uniform(0.5, 1.0, size=(4, 4))
        out = region_embedding(weighting, entry, layer=1)
        outside = out.values[weighting == 0.0]
        assert np.array_equal(outside, np.zeros_like(outside))

    def test_missing_entry(self):
        with pytest.raises(MissingRegionFeatures):
            region_embedding(np.zeros((2, 2)), None, layer=1)


class TestFuseRegionOutputs:
    def _outputs(self, rng, shape=(4, 4, 6), labels=((1, "face"), (1, "upper"), (1, "lower"))):
        return [RegionAdapterOutput(label=lbl, layer=1, values=rng.normal(size=shape))
                for lbl in labels]

    def test_empty_list_unchanged(self, rng):
        z = rng.normal(size=(4, 4, 6))
        assert np.array_equal(fuse_region_outputs(z, [], 1.0), z)

    def test_scale_zero_unchanged(self, rng):
        z = rng.normal(size=(4, 4, 6))
        assert np.array_equal(fuse_region_outputs(z, self._outputs(rng), 0.0), z)

    def test_elementwise_sum_oracle(self, rng):
        z = rng.normal(size=(4, 4, 6))
        outputs = self._outputs(rng)
        fused = fuse_region_outputs(z, outputs, 0.7)
        expected = z + 0.7 * sum(o.values for o in outputs)
        assert np.allclose(fused, expected, atol=1e-12)

    def test_exact_order_invariance(self, rng):
        z = rng.normal(size=(4, 4, 6))
        outputs = self._outputs(rng)
        a = fuse_region_outputs(z, outputs, 1.3)
        b = fuse_region_outputs(z, outputs[::-1], 1.3)
        c = fuse_region_outputs(z, [outputs[1], outputs[2], outputs[0]], 1.3)
        assert np.array_equal(a, b) and np.array_equal(a, c)

    def test_contribution_scales_exactly(self, rng):
        z = rng.normal(size=(4, 4, 6))
        base_out = self._outputs(rng, labels=((1, "face"),))
        fused1 = fuse_region_outputs(z, base_out, 1.0)
        scaled = [RegionAdapterOutput(label=base_out[0].label, layer=1,
                                      values=3.0 * base_out[0].values)]
        fused3 = fuse_region_outputs(z, scaled, 1.0)
        assert np.allclose(fused3 - z, 3.0 * (fused1 - z), atol=1e-12)

    def test_shape_mismatch(self, rng):
        z = rng.normal(size=(4, 4, 6))
        bad = [RegionAdapterOutput(label=(1, "face"), layer=1,
                                   values=rng.normal(size=(2, 2, 6)))]
        with pytest.raises(ShapeMismatch):
            fuse_region_outputs(z, bad, 1.0)

    def test_hard_mask_locality(self, engine, rng):
        # disjoint hard masks: changing one region's features moves only its cells
        left = np.zeros((8, 8))
        left[:, :4] = 1.0
        right = 1.0 - left
        z = rng.normal(size=(8, 8, engine.config.base_width))

        def fused_with(face_feats):
            entries = {(1, "face"): face_feats, (1, "upper"): rng_fixed}
            bundle = engine.build_bundle(entries)
            outs = [region_embedding(left, bundle.entry((1, "face")), 1),
                    region_embedding(right, bundle.entry((1, "upper")), 1)]
            return fuse_region_outputs(z, outs, 1.0)

        rng_fixed = rng.normal(size=(4, 32))
        a = fused_with(rng.normal(size=(4, 32)))
        b = fused_with(rng.normal(size=(4, 32)))
        assert np.array_equal(a[right == 1.0], b[right == 1.0])
        assert np.any(a[left == 1.0] != b[left == 1.0])
