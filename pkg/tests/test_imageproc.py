"""Image primitives against independent oracles (flood fill, skimage)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.feature import canny as skimage_canny
from skimage.metrics import structural_similarity as skimage_ssim

from dascam import imageproc as ip


def rng(seed=0):
    return np.random.default_rng(seed)


def flood_fill_labels(mask, connectivity):
    """Independent stack-based flood fill, labels in row-major encounter order."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    if connectivity == 4:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        steps = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1)
                 if (di, dj) != (0, 0)]
    k = 0
    for si in range(h):
        for sj in range(w):
            if mask[si, sj] and not labels[si, sj]:
                k += 1
                stack = [(si, sj)]
                labels[si, sj] = k
                while stack:
                    i, j = stack.pop()
                    for di, dj in steps:
                        ni, nj = i + di, j + dj
                        if (0 <= ni < h and 0 <= nj < w and mask[ni, nj]
                                and not labels[ni, nj]):
                            labels[ni, nj] = k
                            stack.append((ni, nj))
    return labels, k


def same_partition(a, b):
    """True when two label images induce the same foreground partition."""
    if not np.array_equal(a > 0, b > 0):
        return False
    fwd, bwd = {}, {}
    for la, lb in zip(a[a > 0].ravel(), b[b > 0].ravel()):
        if fwd.setdefault(la, lb) != lb or bwd.setdefault(lb, la) != la:
            return False
    return True


class TestConnectedComponents:
    def test_all_zero_map(self):
        cs = ip.connected_components(np.zeros((5, 5)), np.zeros((5, 5)))
        assert cs.count == 0 and cs.sums.size == 0

    def test_two_blocks_analytic(self):
        mask = np.zeros((8, 8))
        mask[1:3, 1:3] = 1
        mask[5:7, 5:7] = 1
        values = np.full((8, 8), 0.5)
        cs = ip.connected_components(mask, values, connectivity=4)
        assert cs.count == 2
        assert np.array_equal(cs.sizes, [4, 4])
        np.testing.assert_allclose(cs.sums, [2.0, 2.0], atol=1e-7)

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_random_maps_match_flood_fill(self, connectivity):
        for seed in range(60):
            mask = (rng(seed).random((16, 16)) < 0.45).astype(np.uint8)
            vals = rng(seed + 1).random((16, 16))
            cs = ip.connected_components(mask, vals, connectivity)
            ref_labels, ref_k = flood_fill_labels(mask, connectivity)
            assert cs.count == ref_k
            assert same_partition(cs.labels, ref_labels)
            for k in range(1, ref_k + 1):
                sel = ref_labels == k
                mine = np.unique(cs.labels[sel])
                assert mine.size == 1
                m = mine[0] - 1
                assert cs.sizes[m] == sel.sum()
                np.testing.assert_allclose(cs.sums[m], vals[sel].sum(), rtol=1e-6)

    def test_sizes_sum_to_foreground(self):
        mask = (rng(7).random((20, 20)) < 0.5).astype(np.uint8)
        cs = ip.connected_components(mask, np.ones((20, 20)))
        assert cs.sizes.sum() == mask.sum()

    def test_diagonal_pixels_split_under_4_join_under_8(self):
        mask = np.eye(4)
        assert ip.connected_components(mask, mask, 4).count == 4
        assert ip.connected_components(mask, mask, 8).count == 1

    def test_scan_order_only_renames(self):
        mask = (rng(11).random((12, 12)) < 0.5).astype(np.uint8)
        a = ip.connected_components(mask, mask.astype(float), 4)
        b = ip.connected_components(mask.T.copy(), mask.T.astype(float), 4)
        assert same_partition(a.labels, b.labels.T)

    def test_dimension_mismatch(self):
        with pytest.raises(ip.ImageError, match="connected_components"):
            ip.connected_components(np.zeros((4, 4)), np.zeros((4, 5)))


class TestCanny:
    def test_constant_image_has_no_edges(self):
        assert ip.canny(np.full((24, 24), 0.5)).sum() == 0

    def test_vertical_step_edge_location(self):
        img = np.full((32, 32), 0.2)
        img[:, 16:] = 0.8
        mine = ip.canny(img)
        cols = np.nonzero(mine)[1]
        assert cols.size > 0
        assert np.all(np.abs(cols - 15.5) <= 1.0)
        ref = skimage_canny(img, sigma=1.4, low_threshold=0.1,
                            high_threshold=0.3, use_quantiles=False)
        ref_cols = np.nonzero(ref)[1]
        assert abs(cols.mean() - ref_cols.mean()) <= 1.0

    def test_foreground_requires_nonzero_gradient(self):
        img = rng(3).random((20, 20))
        edges = ip.canny(img)
        k = ip._gaussian_kernel1d(1.4, 2)
        smooth = ip._convolve2d_reflect(img, k, k)
        mag = np.hypot(ip._filter3(smooth, ip._SOBEL_X),
                       ip._filter3(smooth, ip._SOBEL_Y))
        assert np.all(mag[edges > 0] > 0)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_raising_high_never_adds_edges(self, seed):
        img = rng(seed).random((16, 16))
        lo = ip.canny(img, low=0.05, high=0.2)
        hi = ip.canny(img, low=0.05, high=0.5)
        assert np.all(lo[hi > 0] > 0)

    def test_threshold_order_enforced(self):
        with pytest.raises(ip.ImageError, match="low"):
            ip.canny(np.zeros((16, 16)), low=0.5, high=0.2)

    def test_tiny_image_rejected(self):
        with pytest.raises(ip.ImageError, match="smaller"):
            ip.canny(np.zeros((3, 3)))

    def test_output_is_binary(self):
        e = ip.canny(rng(5).random((18, 18)))
        assert set(np.unique(e)) <= {0, 1}


class TestSsim:
    def test_identical_images_exactly_one(self):
        x = rng(1).random((24, 24))
        assert ip.ssim(x, x) == 1.0

    def test_matches_reference_implementation(self):
        for seed in range(6):
            a = rng(seed).random((32, 32))
            b = np.clip(a + rng(seed + 50).normal(0, 0.15, a.shape), 0, 1)
            ref = skimage_ssim(a, b, gaussian_weights=True, sigma=1.5,
                               use_sample_covariance=False, data_range=1.0)
            assert ip.ssim(a, b) == pytest.approx(ref, abs=1e-4)

    def test_inverted_midcontrast_image_matches_reference(self):
        yy, xx = np.mgrid[0:40, 0:40]
        img = 0.5 + 0.25 * np.sin(xx / 4.0) * np.cos(yy / 5.0)
        ref = skimage_ssim(img, 1 - img, gaussian_weights=True, sigma=1.5,
                           use_sample_covariance=False, data_range=1.0)
        assert ip.ssim(img, 1 - img) == pytest.approx(ref, abs=1e-4)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry(self, seed):
        a = rng(seed).random((16, 16))
        b = rng(seed + 1).random((16, 16))
        assert ip.ssim(a, b) == ip.ssim(b, a)

    def test_below_one_unless_equal(self):
        a = rng(9).random((20, 20))
        b = a.copy()
        b[3, 3] += 0.2
        assert ip.ssim(a, np.clip(b, 0, 1)) < 1.0

    def test_rgb_averaged_to_gray(self):
        a = rng(10).random((16, 16, 3))
        assert ip.ssim(a, a.mean(axis=2)) == 1.0

    def test_size_and_shape_guards(self):
        with pytest.raises(ip.ImageError, match="ssim"):
            ip.ssim(np.zeros((16, 16)), np.zeros((16, 15)))
        with pytest.raises(ip.ImageError, match="window"):
            ip.ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestResize:
    def test_same_size_is_identity(self):
        img = rng(2).random((7, 5, 3))
        np.testing.assert_array_equal(ip.bilinear_resize(img, 5, 7), img)

    def test_constant_stays_constant(self):
        out = ip.bilinear_resize(np.full((4, 6), 0.3), 13, 9)
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_checkerboard_2x_hand_values(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])
        # corner-aligned source positions {0, 1/3, 2/3, 1}; value = r + c - 2rc
        expected = np.array([
            [0, 1 / 3, 2 / 3, 1],
            [1 / 3, 4 / 9, 5 / 9, 2 / 3],
            [2 / 3, 5 / 9, 4 / 9, 1 / 3],
            [1, 2 / 3, 1 / 3, 0],
        ])
        np.testing.assert_allclose(ip.bilinear_resize(board, 4, 4), expected,
                                   atol=1e-12)

    def test_gather_weights_agree_with_resize(self):
        src = rng(4).random((5, 7)).astype(np.float32)
        idx, wgt = ip.bilinear_weights(5, 7, 11, 13)
        gathered = (src.ravel()[idx] * wgt).sum(axis=2)
        np.testing.assert_allclose(gathered, ip.bilinear_resize(src, 13, 11),
                                   atol=1e-6)
        np.testing.assert_allclose(wgt.sum(axis=2), 1.0, atol=1e-6)

    def test_bad_target_rejected(self):
        with pytest.raises(ip.ImageError):
            ip.bilinear_resize(np.zeros((4, 4)), 0, 3)


class TestPng:
    def test_rgb_round_trip(self, tmp_path):
        img = rng(6).random((9, 11, 3))
        p = tmp_path / "t.png"
        ip.write_png(p, img)
        back = ip.read_png(p)
        assert back.shape == (9, 11, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-6

    def test_gray_round_trip(self, tmp_path):
        img = rng(7).random((6, 6))
        p = tmp_path / "g.png"
        ip.write_png(p, img)
        assert np.abs(ip.read_png(p) - img).max() <= 0.5 / 255 + 1e-6

    def test_non_png_rejected(self, tmp_path):
        p = tmp_path / "fake.png"
        from PIL import Image
        Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(p, format="JPEG")
        with pytest.raises(ip.ImageError, match="fake.png"):
            ip.read_png(p)


class TestDilate:
    def test_single_pixel_grows_to_3x3(self):
        m = np.zeros((5, 5), dtype=np.uint8)
        m[2, 2] = 1
        out = ip.dilate(m, 1)
        assert out.sum() == 9
        assert np.all(out[1:4, 1:4] == 1)

    def test_zero_px_is_identity(self):
        m = (rng(8).random((6, 6)) < 0.5).astype(np.uint8)
        assert np.array_equal(ip.dilate(m, 0), m)
