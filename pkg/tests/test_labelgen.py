import itertools
import warnings
from collections import deque

import numpy as np
import pytest

from dla.errors import ConfigError, EmptyClassError, ShapeMismatchError
from dla.labelgen import (
    LabeledVoxelSet,
    LabelGenConfig,
    build_and_undersample,
    connected_components,
    erode,
    extract_bone,
    extract_soft_tissue,
    extract_vasculature,
    generate_labels,
)
from dla.phantom import PhantomSpec, generate_phantom
from dla.volume import BONE, ROI, SOFT, VESSEL, Volume, subtract


def _offsets(connectivity):
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        n = sum(map(abs, d))
        if 0 < n and (connectivity == 26 or (connectivity == 18 and n <= 2) or (connectivity == 6 and n == 1)):
            out.append(d)
    return out


def flood_fill_oracle(mask, connectivity):
    """Breadth-first labelling, ids in linear scan order of first voxel."""
    ids = np.zeros(mask.shape, dtype=np.int64)
    offsets = _offsets(connectivity)
    k = 0
    for start in zip(*np.nonzero(mask)):  # np.nonzero walks in C order
        if ids[start]:
            continue
        k += 1
        ids[start] = k
        queue = deque([start])
        while queue:
            p = queue.popleft()
            for d in offsets:
                q = tuple(a + b for a, b in zip(p, d))
                if all(0 <= c < n for c, n in zip(q, mask.shape)) and mask[q] and not ids[q]:
                    ids[q] = k
                    queue.append(q)
    return ids, k


def erode_oracle(mask, r):
    out = np.zeros_like(mask)
    nz, ny, nx = mask.shape
    for z, y, x in itertools.product(range(nz), range(ny), range(nx)):
        box = mask[max(z - r, 0):z + r + 1, max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1]
        out[z, y, x] = box.all()
    return out


class TestConnectedComponents:
    def test_empty(self):
        assert connected_components(np.zeros((3, 3, 3), bool)).n_components == 0

    def test_diagonal_neighbours(self):
        m = np.zeros((1, 2, 2), bool)
        m[0, 0, 0] = m[0, 1, 1] = True
        assert connected_components(m, 26).n_components == 1
        assert connected_components(m, 18).n_components == 1
        assert connected_components(m, 6).n_components == 2

    def test_corner_neighbours(self):
        m = np.zeros((2, 2, 2), bool)
        m[0, 0, 0] = m[1, 1, 1] = True
        assert connected_components(m, 26).n_components == 1
        assert connected_components(m, 18).n_components == 2

    @pytest.mark.parametrize("connectivity", [6, 18, 26])
    def test_matches_flood_fill(self, connectivity):
        rng = np.random.default_rng(connectivity)
        for _ in range(20):
            m = rng.random((8, 8, 8)) < rng.uniform(0.1, 0.5)
            got = connected_components(m, connectivity)
            ids, k = flood_fill_oracle(m, connectivity)
            assert got.n_components == k
            np.testing.assert_array_equal(got.ids, ids)

    def test_density_03_16cube(self):
        m = np.random.default_rng(7).random((16, 16, 16)) < 0.3
        assert connected_components(m, 26).n_components == flood_fill_oracle(m, 26)[1]

    def test_sizes_sum_to_popcount(self, rng):
        m = rng.random((10, 10, 10)) < 0.3
        cc = connected_components(m)
        assert cc.sizes.sum() == m.sum()
        np.testing.assert_array_equal(cc.sizes, np.bincount(cc.ids.ravel())[1:])

    def test_bad_connectivity(self):
        with pytest.raises(ValueError):
            connected_components(np.zeros((2, 2, 2), bool), 8)


class TestErode:
    def test_radius_zero_identity(self, rng):
        m = rng.random((5, 5, 5)) < 0.5
        np.testing.assert_array_equal(erode(m, 0), m)

    def test_cube(self):
        m = np.zeros((7, 7, 7), bool)
        m[1:6, 1:6, 1:6] = True
        expected = np.zeros_like(m)
        expected[2:5, 2:5, 2:5] = True
        np.testing.assert_array_equal(erode(m, 1), expected)

    def test_matches_oracle_12cube(self):
        m = np.random.default_rng(3).random((12, 12, 12)) < 0.8
        np.testing.assert_array_equal(erode(m, 1), erode_oracle(m, 1))

    @pytest.mark.parametrize("r", [1, 2])
    def test_matches_oracle_random(self, r):
        rng = np.random.default_rng(r)
        for _ in range(10):
            m = rng.random((8, 8, 8)) < 0.85
            np.testing.assert_array_equal(erode(m, r), erode_oracle(m, r))


class TestExtraction:
    def test_all_zero_subtraction(self):
        assert not extract_vasculature(Volume.full((8, 8, 8), 0.0)).any()

    def test_tube_survives_speck_does_not(self):
        a = np.zeros((20, 20, 20), np.float32)
        a[2:10, 2:7, 2:7] = 900.0  # 200 voxels
        a[15:18, 15, 15] = 900.0  # 3 voxels
        out = extract_vasculature(Volume(a), LabelGenConfig(vessel_min_component_voxels=50))
        assert out.sum() == 200 and not out[15:18, 15, 15].any()

    def test_bone_excludes_vessels(self):
        fill = np.zeros((10, 10, 10), np.float32)
        fill[:, :, :] = 1200.0
        vessels = np.zeros(fill.shape, bool)
        vessels[5, 5, 5] = True
        bone = extract_bone(Volume(fill), vessels, LabelGenConfig(bone_min_component_voxels=10))
        assert not bone[5, 5, 5] and bone.sum() == 999

    def test_bone_all_zero(self):
        assert not extract_bone(Volume.full((4, 4, 4)), np.zeros((4, 4, 4), bool)).any()

    def test_soft_air_is_empty(self):
        v = Volume.full((6, 6, 6), -1000.0)
        z = np.zeros(v.shape, bool)
        assert not extract_soft_tissue(v, z, z).any()

    def test_soft_interior_voxel(self):
        v = Volume.full((6, 6, 6), 40.0)
        z = np.zeros(v.shape, bool)
        assert extract_soft_tissue(v, z, z)[3, 3, 3]

    def test_shape_checks(self):
        v = Volume.full((4, 4, 4))
        with pytest.raises(ShapeMismatchError):
            extract_bone(v, np.zeros((3, 3, 3), bool))
        with pytest.raises(ShapeMismatchError):
            extract_soft_tissue(v, np.zeros((4, 4, 4), bool), np.zeros((3, 3, 3), bool))

    def test_clean_phantom_exact(self, clean_case):
        cfg = LabelGenConfig()
        vessels = extract_vasculature(subtract(clean_case.fill, clean_case.mask), cfg)
        np.testing.assert_array_equal(vessels, clean_case.truth == VESSEL)
        bone = extract_bone(clean_case.fill, vessels, cfg)
        np.testing.assert_array_equal(bone, clean_case.truth == BONE)

    def test_soft_dice_large_phantom(self):
        # erosion removes a one-voxel rim, so Dice depends on the surface-to-volume ratio
        case = generate_phantom(PhantomSpec(dims=(160, 160, 112), skull_semiaxes_mm=(35, 35, 24),
                                            noise_sigma_hu=0.0, seed=0))
        cfg = LabelGenConfig()
        vessels = extract_vasculature(subtract(case.fill, case.mask), cfg)
        soft = extract_soft_tissue(case.fill, vessels, extract_bone(case.fill, vessels, cfg), cfg)
        truth = case.truth == SOFT
        dice = 2 * (soft & truth).sum() / (soft.sum() + truth.sum())
        assert dice >= 0.95

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            LabelGenConfig(vessel_min_component_voxels=0)
        with pytest.raises(ConfigError):
            LabelGenConfig(soft_range_hu=(10, -10))


def _masks(nv, nb, ns, shape=(10, 100, 100)):
    flat = np.zeros(int(np.prod(shape)), np.uint8)
    flat[:nv] = VESSEL
    flat[nv:nv + nb] = BONE
    flat[nv + nb:nv + nb + ns] = SOFT
    flat = flat.reshape(shape)
    return flat == VESSEL, flat == BONE, flat == SOFT


class TestUndersample:
    def test_balanced_counts(self):
        _, s = build_and_undersample(*_masks(100, 40000, 50000))
        assert len(s) == 300 and s.counts() == {VESSEL: 100, BONE: 100, SOFT: 100}

    def test_all_vessels_kept(self):
        v, b, so = _masks(100, 4000, 5000)
        _, s = build_and_undersample(v, b, so)
        np.testing.assert_array_equal(np.sort(s.indices[s.classes == VESSEL]), np.flatnonzero(v))

    def test_deterministic(self):
        m = _masks(50, 4000, 5000)
        _, a = build_and_undersample(*m, LabelGenConfig(undersample_seed=9))
        _, b = build_and_undersample(*m, LabelGenConfig(undersample_seed=9))
        np.testing.assert_array_equal(a.indices, b.indices)

    def test_shortfall_warns(self):
        with pytest.warns(UserWarning, match="bone"):
            _, s = build_and_undersample(*_masks(100, 60, 5000))
        assert s.counts() == {VESSEL: 100, BONE: 60, SOFT: 100}

    @pytest.mark.parametrize("which,name", [(0, "vessel"), (1, "bone"), (2, "soft")])
    def test_empty_class(self, which, name):
        counts = [10, 20, 30]
        counts[which] = 0
        with pytest.raises(EmptyClassError, match=name):
            build_and_undersample(*_masks(*counts))

    def test_precedence(self):
        v = np.zeros((2, 2, 2), bool)
        v[0, 0, 0] = True
        bone = np.zeros((2, 2, 2), bool)
        bone[0] = True
        soft = np.ones((2, 2, 2), bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            labels, _ = build_and_undersample(v, bone, soft)
        assert labels[0, 0, 0] == VESSEL
        assert (labels[0].ravel()[1:] == BONE).all() and (labels[1] == SOFT).all()

    def test_roi_restriction(self, noisy_case):
        roi = ROI(28, 68, 28, 68, 2, 18)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, s = generate_labels(noisy_case.mask, noisy_case.fill, roi=roi)
        assert np.isin(s.indices, roi.linear_indices(noisy_case.truth.shape)).all()


class TestLabeledVoxelSet:
    def test_tsv_round_trip(self, tmp_path):
        s = LabeledVoxelSet(np.array([5, 1, 30]), np.array([1, 2, 3]), (2, 3, 6))
        s.to_tsv(tmp_path / "s.tsv")
        lines = (tmp_path / "s.tsv").read_text().splitlines()
        assert lines[0] == "# dims\t6\t3\t2" and lines[1] == "5\t1"
        back = LabeledVoxelSet.from_tsv(tmp_path / "s.tsv")
        np.testing.assert_array_equal(back.indices, s.indices)
        np.testing.assert_array_equal(back.classes, s.classes)
        assert back.shape == s.shape

    @pytest.mark.parametrize("indices,classes", [([0, 0], [1, 2]), ([99], [1]), ([0], [4])])
    def test_invalid(self, indices, classes):
        with pytest.raises(ValueError):
            LabeledVoxelSet(np.array(indices), np.array(classes), (2, 2, 2))
