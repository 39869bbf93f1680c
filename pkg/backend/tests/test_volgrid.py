import json

import numpy as np
import pytest

from app.ops import autodiff as ad
from app.ops.volgrid import (
    LabelMap,
    ProbMap,
    Volume,
    adaptive_pool_matrix,
    build_grid,
    downsample_label_nearest,
    extract_patch,
    gaussian_weight_map,
    interp_matrix,
    low_res_shape,
    one_hot,
    patch_stack,
    read_volume,
    resample_trilinear,
    scatter_patch,
    upsample_probs,
    upsample_trilinear,
    write_volume,
)


class TestContainers:
    def test_volume_rejects_non_finite(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            Volume(data)

    def test_volume_rejects_non_positive_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))

    def test_label_map_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            LabelMap(np.full((2, 2, 2), 4), num_classes=4)

    def test_label_map_is_uint8(self):
        labels = LabelMap(np.ones((2, 2, 2), dtype=np.int64), num_classes=3)
        assert labels.data.dtype == np.uint8

    def test_prob_map_argmax(self):
        data = np.zeros((3, 1, 1, 2))
        data[2, 0, 0, 0] = 1.0
        data[1, 0, 0, 1] = 1.0
        labels = ProbMap(data).argmax()
        assert labels.num_classes == 3
        assert labels.data.ravel().tolist() == [2, 1]


class TestBuildGrid:
    def test_floor_grid_counts(self):
        grid = build_grid((480, 480, 480), (128, 128, 128), 0.5, "floor")
        assert grid.counts == (6, 6, 6)
        assert grid.n == 216
        assert grid.stride == (64, 64, 64)
        assert grid.origins[-1] == (320, 320, 320)

    def test_cover_grid_counts_and_clamp(self):
        grid = build_grid((480, 480, 480), (128, 128, 128), 0.5, "cover")
        assert grid.counts == (7, 7, 7)
        assert grid.n == 343
        assert grid.origins[-1] == (352, 352, 352)

    def test_half_stride_rounds_up(self):
        grid = build_grid((10, 10, 10), (5, 5, 5), 0.5, "floor")
        assert grid.stride == (3, 3, 3)
        assert grid.counts == (2, 2, 2)
        assert build_grid((9, 9, 9), (3, 3, 3), 0.5).stride == (2, 2, 2)

    def test_patch_equal_to_volume(self):
        grid = build_grid((128, 128, 128), (128, 128, 128), 0.5)
        assert grid.origins == [(0, 0, 0)]

    def test_row_major_order(self):
        grid = build_grid((24, 24, 24), (8, 8, 8), 0.5)
        assert grid.origins[:3] == [(0, 0, 0), (0, 0, 4), (0, 0, 8)]
        assert grid.index_of((0, 4, 0)) == grid.counts[2]

    def test_cover_grid_covers_every_voxel(self):
        grid = build_grid((21, 17, 9), (8, 6, 4), 0.5, "cover")
        covered = np.zeros((21, 17, 9), dtype=bool)
        for origin in grid.origins:
            region = tuple(slice(o, o + p) for o, p in zip(origin, grid.patch_shape))
            covered[region] = True
        assert covered.all()

    def test_origins_stay_in_bounds(self):
        for mode in ("floor", "cover"):
            grid = build_grid((30, 25, 19), (8, 8, 8), (0.5, 0.25, 0.75), mode)
            for origin in grid.origins:
                assert all(o + p <= v for o, p, v in zip(origin, grid.patch_shape, grid.volume_shape))

    def test_patch_exceeds_volume(self):
        with pytest.raises(ValueError, match="patch exceeds volume"):
            build_grid((16, 16, 16), (32, 8, 8))

    @pytest.mark.parametrize("overlap", [0.0, 1.0, -0.5])
    def test_overlap_out_of_range(self, overlap):
        with pytest.raises(ValueError, match="overlap"):
            build_grid((16, 16, 16), (8, 8, 8), overlap)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="grid mode"):
            build_grid((16, 16, 16), (8, 8, 8), 0.5, "strided")


class TestGaussianWeightMap:
    def test_corner_value_matches_closed_form(self):
        weights = gaussian_weight_map((16, 16, 16)).data
        # centre falls between voxels; the nearest ones sit 0.5 off per axis and carry the max
        expected = np.exp(-3 * (7.5**2 - 0.5**2) / (2 * 2.0**2))
        assert weights[0, 0, 0] == pytest.approx(expected, rel=1e-4)

    def test_max_one_positive_symmetric(self):
        weights = gaussian_weight_map((8, 6, 5)).data
        assert weights.max() == pytest.approx(1.0)
        assert weights.min() > 0
        for axis in range(3):
            np.testing.assert_allclose(weights, np.flip(weights, axis=axis), rtol=1e-6)

    def test_separable(self):
        weights = gaussian_weight_map((6, 6, 6)).data.astype(np.float64)
        # w[i,j,k]·w[c,c,c]² == w[i,c,c]·w[c,j,c]·w[c,c,k] for a product of axis profiles
        c = 2
        outer = np.einsum("i,j,k->ijk", weights[:, c, c], weights[c, :, c], weights[c, c, :])
        np.testing.assert_allclose(weights * weights[c, c, c] ** 2, outer, rtol=1e-5)

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ValueError):
            gaussian_weight_map((4, 4, 4), sigma_frac=0.0)


class TestPatches:
    def test_ramp_extract(self):
        ramp = np.broadcast_to(np.arange(16.0), (16, 16, 16)).copy()
        patch = extract_patch(ramp, (0, 0, 8), (4, 4, 4))
        assert patch[0, 0].tolist() == [8.0, 9.0, 10.0, 11.0]

    def test_extract_whole_volume_is_a_copy(self, rng):
        data = rng.normal(size=(4, 4, 4))
        patch = extract_patch(data, (0, 0, 0), (4, 4, 4))
        np.testing.assert_array_equal(patch, data)
        patch[0, 0, 0] = 99.0
        assert data[0, 0, 0] != 99.0

    def test_extract_keeps_channel_axis(self):
        probs = np.zeros((3, 8, 8, 8))
        assert extract_patch(probs, (2, 2, 2), (4, 4, 4)).shape == (3, 4, 4, 4)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError, match="out of bounds"):
            extract_patch(np.zeros((8, 8, 8)), (6, 0, 0), (4, 4, 4))

    def test_scatter_inverts_extract(self, rng):
        data = rng.normal(size=(8, 8, 8))
        target = np.zeros_like(data)
        scatter_patch(target, extract_patch(data, (4, 0, 2), (4, 4, 4)), (4, 0, 2))
        np.testing.assert_array_equal(target[4:8, 0:4, 2:6], data[4:8, 0:4, 2:6])
        assert target[:4].sum() == 0

    def test_patch_stack(self):
        grid = build_grid((16, 16, 16), (8, 8, 8), 0.5)
        stack = patch_stack(np.arange(16**3, dtype=np.float32).reshape(16, 16, 16), grid)
        assert stack.shape == (grid.n, 8, 8, 8)


class TestResampling:
    def test_interp_matrix_upsamples_ramp(self):
        out = interp_matrix(4, 8) @ np.array([0.0, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])

    def test_interp_matrix_rows_sum_to_one(self):
        np.testing.assert_allclose(interp_matrix(24, 8).sum(axis=1), 1.0)

    def test_adaptive_pool_rows_average(self):
        mat = adaptive_pool_matrix(5, 2)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0)
        assert mat[0, :3].tolist() == pytest.approx([1 / 3] * 3)

    def test_low_res_shape(self):
        assert low_res_shape((48, 48, 47), 3.0) == (16, 16, 16)
        assert low_res_shape((2, 2, 2), 8.0) == (1, 1, 1)

    def test_resample_constant_volume(self):
        volume = Volume(np.full((24, 24, 24), 0.7), spacing=(1.0, 1.0, 2.0))
        low = resample_trilinear(volume, 3.0)
        assert low.shape == (8, 8, 8)
        np.testing.assert_allclose(low.data, 0.7, rtol=1e-6)
        assert low.spacing == pytest.approx((3.0, 3.0, 6.0))

    def test_resample_rejects_upsampling_factor(self):
        with pytest.raises(ValueError):
            resample_trilinear(Volume(np.zeros((8, 8, 8))), 0.5)

    def test_upsample_trilinear_renormalizes(self, rng):
        data = rng.random((3, 4, 4, 4)) + 0.1
        data /= data.sum(axis=0, keepdims=True)
        up = upsample_trilinear(ProbMap(data), (12, 12, 12))
        assert up.shape == (12, 12, 12)
        np.testing.assert_allclose(up.data.sum(axis=0), 1.0, atol=1e-6)

    def test_upsample_probs_matches_numpy_path(self, rng):
        data = rng.random((2, 3, 3, 3)) + 0.1
        data /= data.sum(axis=0, keepdims=True)
        tensor = upsample_probs(ad.DTensor(data), (9, 9, 9))
        np.testing.assert_allclose(tensor.values, upsample_trilinear(ProbMap(data), (9, 9, 9)).data, atol=1e-5)

    def test_upsample_probs_gradient(self, float64, rng):
        weights = rng.normal(size=(2, 6, 6, 6))
        base = rng.random((2, 3, 3, 3)) + 0.5
        err = ad.finite_diff_check(
            lambda p: ad.sum(ad.mul(upsample_probs(p, (6, 6, 6)), weights)), base, eps=1e-6
        )
        assert err < 1e-3


class TestLabels:
    def test_one_hot(self):
        encoded = one_hot(LabelMap(np.full((1, 1, 1), 2), num_classes=4))
        assert encoded.data[:, 0, 0, 0].tolist() == [0.0, 0.0, 1.0, 0.0]

    def test_downsample_label_nearest_keeps_blocks(self):
        data = np.zeros((6, 6, 6), dtype=np.uint8)
        data[:3] = 1
        low = downsample_label_nearest(LabelMap(data, 2), 3.0)
        assert low.shape == (2, 2, 2)
        assert low.data[0].min() == 1
        assert low.data[1].max() == 0


class TestSidecarFiles:
    def test_label_map_header(self, tmp_path):
        labels = LabelMap(np.arange(8).reshape(2, 2, 2) % 3, num_classes=3, spacing=(1.0, 1.5, 2.0))
        json_path, raw_path = write_volume(tmp_path / "case_seg", labels)
        header = json.loads(json_path.read_text())
        assert header == {"classes": 3, "dtype": "u8", "shape": [2, 2, 2], "spacing": [1.0, 1.5, 2.0]}
        assert raw_path.stat().st_size == 8

        loaded = read_volume(tmp_path / "case_seg")
        assert isinstance(loaded, LabelMap)
        np.testing.assert_array_equal(loaded.data, labels.data)

    def test_volume_is_little_endian_f32(self, tmp_path):
        volume = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
        _, raw_path = write_volume(tmp_path / "case_img", volume)
        payload = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
        assert payload.tolist() == list(range(8))
        assert isinstance(read_volume(tmp_path / "case_img"), Volume)

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_volume(tmp_path / "nope")
