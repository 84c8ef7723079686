import numpy as np
import pytest

from voxbench import phantoms
from voxbench.phantoms import (
    DegenerateVolumeWarning,
    LabelMap,
    Volume,
    generate_phantom,
    normalize_intensity,
    normalize_percentile,
    relabel_for_task,
)


class TestGeneratePhantom:
    def test_deterministic(self):
        v1, l1 = generate_phantom(7, "A", (32, 32, 32))
        v2, l2 = generate_phantom(7, "A", (32, 32, 32))
        assert np.array_equal(v1.voxels, v2.voxels)
        assert np.array_equal(l1.labels, l2.labels)

    def test_modalities_share_geometry(self):
        va, la = generate_phantom(7, "A", (32, 32, 32))
        vb, lb = generate_phantom(7, "B", (32, 32, 32))
        assert np.array_equal(la.labels, lb.labels)
        assert not np.array_equal(va.voxels, vb.voxels)

    def test_tumor_rate_over_seeds(self):
        # seed-driven coin at p=0.5: 100 seeds should give 50 +- 15 tumors
        count = sum(
            (generate_phantom(s, "A", (32, 32, 32))[1].labels == 5).any()
            for s in range(100)
        )
        assert 35 <= count <= 65

    def test_has_four_organs(self):
        _, labels = generate_phantom(3, "A", (32, 32, 32))
        present = set(np.unique(labels.labels))
        assert {1, 2, 3, 4} <= present

    def test_tumor_embedded_in_large_organ(self):
        for seed in range(30):
            _, labels = generate_phantom(seed, "A", (32, 32, 32))
            tumor = labels.labels == 5
            if not tumor.any():
                continue
            # every tumor voxel came from the large organ by construction;
            # redrawing geometry without the tumor step must show organ 1 there
            grown = phantoms._draw_geometry(seed, (32, 32, 32))[0]
            assert set(np.unique(grown[tumor])) <= {1, 5}

    def test_shape_too_small_rejected(self):
        with pytest.raises(ValueError, match="at least 16"):
            generate_phantom(0, "A", (8, 32, 32))

    def test_unknown_modality_rejected(self):
        with pytest.raises(ValueError, match="modality"):
            generate_phantom(0, "C", (32, 32, 32))

    def test_different_seeds_differ(self):
        _, l1 = generate_phantom(1, "A", (32, 32, 32))
        _, l2 = generate_phantom(2, "A", (32, 32, 32))
        assert not np.array_equal(l1.labels, l2.labels)


class TestNormalize:
    def _vol(self, values):
        arr = np.asarray(values, dtype=np.float32)
        return Volume(voxels=arr, spacing=(1, 1, 1), modality="A", id="t")

    def test_clamp_floor(self):
        v = self._vol(np.full((8, 8, 8), -600.0))
        out = normalize_intensity(v, (-500, 500))
        assert np.all(out.voxels == 0.0)

    def test_midpoint(self):
        v = self._vol(np.zeros((8, 8, 8)))
        out = normalize_intensity(v, (-500, 500))
        assert np.allclose(out.voxels, 0.5)

    def test_clamp_ceiling(self):
        v = self._vol(np.full((8, 8, 8), 500.0))
        out = normalize_intensity(v, (-500, 500))
        assert np.all(out.voxels == 1.0)

    def test_bad_window_rejected(self):
        v = self._vol(np.zeros((8, 8, 8)))
        with pytest.raises(ValueError, match="low < high"):
            normalize_intensity(v, (5, 5))

    def test_idempotent_on_unit_window(self):
        rng = np.random.default_rng(0)
        v = self._vol(rng.random((8, 8, 8)))
        once = normalize_intensity(v, (0.0, 1.0))
        twice = normalize_intensity(once, (0.0, 1.0))
        assert np.array_equal(once.voxels, twice.voxels)

    def test_metadata_preserved(self):
        v = Volume(voxels=np.zeros((8, 8, 8), dtype=np.float32),
                   spacing=(1.5, 1.5, 2.0), modality="B", id="x9")
        out = normalize_intensity(v, (-1, 1))
        assert out.modality == "B" and out.id == "x9" and out.spacing == (1.5, 1.5, 2.0)


class TestNormalizePercentile:
    def test_low_values_map_to_zero(self):
        arr = np.arange(1000, dtype=np.float32).reshape(10, 10, 10)
        v = Volume(voxels=arr, spacing=(1, 1, 1), modality="B", id="t")
        out = normalize_percentile(v, 5, 95)
        low = np.percentile(arr, 5)
        assert np.all(out.voxels[arr <= low] == 0.0)

    def test_constant_volume_warns_and_yields_half(self):
        v = Volume(voxels=np.full((8, 8, 8), 3.0, dtype=np.float32),
                   spacing=(1, 1, 1), modality="B", id="t")
        with pytest.warns(DegenerateVolumeWarning):
            out = normalize_percentile(v, 5, 95)
        assert np.all(out.voxels == 0.5)

    def test_affine_equivariance(self):
        rng = np.random.default_rng(1)
        arr = rng.normal(size=(10, 10, 10)).astype(np.float32)
        v1 = Volume(voxels=arr, spacing=(1, 1, 1), modality="B", id="a")
        v2 = Volume(voxels=(2.5 * arr + 7.0), spacing=(1, 1, 1), modality="B", id="b")
        out1 = normalize_percentile(v1, 5, 95)
        out2 = normalize_percentile(v2, 5, 95)
        assert np.allclose(out1.voxels, out2.voxels, atol=1e-5)

    def test_bad_percentiles_rejected(self):
        v = Volume(voxels=np.zeros((8, 8, 8), dtype=np.float32),
                   spacing=(1, 1, 1), modality="A", id="t")
        with pytest.raises(ValueError):
            normalize_percentile(v, 95, 5)


class TestTypes:
    def test_volume_min_extent(self):
        with pytest.raises(ValueError, match="axis < 8"):
            Volume(voxels=np.zeros((4, 8, 8), dtype=np.float32),
                   spacing=(1, 1, 1), modality="A", id="t")

    def test_volume_modality_frozen(self):
        v, _ = generate_phantom(0, "A", (32, 32, 32))
        with pytest.raises(AttributeError):
            v.modality = "B"

    def test_labelmap_range_checked(self):
        with pytest.raises(ValueError, match="out of range"):
            LabelMap(labels=np.full((8, 8, 8), 9, dtype=np.uint8),
                     class_names=("background", "x"))

    def test_relabel_organs_merges_tumor(self):
        for seed in range(20):
            _, labels = generate_phantom(seed, "A", (32, 32, 32))
            if not (labels.labels == 5).any():
                continue
            organs = relabel_for_task(labels, "organs")
            assert organs.labels.max() <= 4
            assert np.all(organs.labels[labels.labels == 5] == 1)
            return
        pytest.skip("no tumor seed found in range")

    def test_relabel_tumor_binary(self):
        _, labels = generate_phantom(0, "A", (32, 32, 32))
        tumor = relabel_for_task(labels, "tumor")
        assert set(np.unique(tumor.labels)) <= {0, 1}
