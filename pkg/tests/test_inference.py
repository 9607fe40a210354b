import numpy as np
import pytest

from dla.errors import ShapeMismatchError
from dla.inference import classify_volume, make_dla
from dla.nn import Architecture, init_params, zeros_like_params
from dla.volume import AIR_HU, ROI, Volume


@pytest.fixture(scope="module")
def fill():
    rng = np.random.default_rng(0)
    return Volume((rng.normal(size=(20, 20, 20)) * 500).astype(np.float32))


class TestClassifyVolume:
    def test_worker_count_independent(self, tiny_arch, fill):
        p = init_params(tiny_arch, 1)
        roi = ROI(2, 18, 2, 18, 2, 18)
        one = classify_volume(p, tiny_arch, fill, roi, workers=1, tile_size=300)
        four = classify_volume(p, tiny_arch, fill, roi, workers=4, tile_size=300)
        assert one.probs.probs.tobytes() == four.probs.probs.tobytes()
        np.testing.assert_array_equal(one.labels, four.labels)
        assert one.labels.shape == (16, 16, 16)

    def test_zero_model_ties_to_vessel(self, tiny_arch, fill):
        res = classify_volume(zeros_like_params(tiny_arch), tiny_arch, fill, ROI(0, 4, 0, 4, 0, 4))
        np.testing.assert_array_equal(res.probs.probs, np.float32(1 / 3))
        assert (res.labels == 1).all()

    def test_probabilities(self, tiny_arch, fill):
        res = classify_volume(init_params(tiny_arch, 2), tiny_arch, fill, ROI(0, 6, 0, 6, 0, 6))
        pr = res.probs.probs
        assert pr.dtype == np.float32 and pr.shape == (6, 6, 6, 3)
        assert ((pr >= 0) & (pr <= 1)).all()
        np.testing.assert_allclose(pr.sum(axis=-1), 1.0, atol=1e-5)
        np.testing.assert_array_equal(res.labels, np.argmax(pr, axis=-1) + 1)
        assert res.voxels_per_s > 0

    def test_tiling_is_irrelevant(self, tiny_arch, fill):
        p = init_params(tiny_arch, 3)
        roi = ROI(0, 5, 0, 5, 0, 5)
        a = classify_volume(p, tiny_arch, fill, roi, tile_size=7)
        b = classify_volume(p, tiny_arch, fill, roi, tile_size=125)
        np.testing.assert_allclose(a.probs.probs, b.probs.probs, rtol=1e-6)

    def test_locality(self, tiny_arch, fill):
        # voxels further than the patch half-width from a change keep their output
        p = init_params(tiny_arch, 4)
        roi = ROI(0, 20, 0, 20, 10, 11)
        base = classify_volume(p, tiny_arch, fill, roi)
        vals = fill.values.copy()
        vals[10, 0:2, 0:2] += 3000
        changed = classify_volume(p, tiny_arch, fill.with_values(vals), roi)
        far = np.zeros(roi.shape, bool)
        far[:, 7:, :] = True
        far[:, :, 7:] = True
        np.testing.assert_array_equal(base.probs.probs[far], changed.probs.probs[far])
        assert not np.array_equal(base.probs.probs[0, 0, 0], changed.probs.probs[0, 0, 0])

    def test_full_labels(self, tiny_arch, fill):
        roi = ROI(1, 3, 2, 4, 3, 5)
        res = classify_volume(zeros_like_params(tiny_arch), tiny_arch, fill, roi)
        full = res.full_labels(fill.shape)
        assert full.sum() == 8 and (full[roi.slices] == 1).all()

    def test_arch_mismatch(self, tiny_arch, fill):
        other = Architecture(conv_layers=4, base_channels=8, patch_size=9)
        with pytest.raises(ShapeMismatchError):
            classify_volume(init_params(other), tiny_arch, fill, ROI(0, 2, 0, 2, 0, 2))

    def test_roi_outside(self, tiny_arch, fill):
        with pytest.raises(ValueError):
            classify_volume(init_params(tiny_arch), tiny_arch, fill, ROI(0, 30, 0, 2, 0, 2))


class TestMakeDla:
    def test_no_vessels(self, fill):
        out = make_dla(fill, np.full(fill.shape, 2, np.uint8))
        assert (out.values == AIR_HU).all()

    def test_all_vessel_roi(self, fill):
        roi = ROI(3, 9, 0, 20, 5, 6)
        out = make_dla(fill, np.ones(roi.shape, np.uint8), roi)
        np.testing.assert_array_equal(out.values[roi.slices], fill.values[roi.slices])
        outside = ~roi.mask(fill.shape)
        assert (out.values[outside] == AIR_HU).all()
        assert out.spacing_mm == fill.spacing_mm

    def test_shape_mismatch(self, fill):
        with pytest.raises(ShapeMismatchError):
            make_dla(fill, np.ones((2, 2, 2), np.uint8), ROI(0, 3, 0, 3, 0, 3))
