"""Warping geometry, bilinear sampling, Gaussian smoothing."""

import numpy as np
import pytest

from depthforge import autodiff, stereo
from depthforge.autodiff import Var, grad_check
from depthforge.stereo import Calib


@pytest.fixture
def calib():
    return Calib(f=60.0, b=0.8)


class TestCalib:
    def test_fb_is_product(self, calib):
        assert calib.fb == pytest.approx(48.0)

    def test_positivity_enforced(self):
        with pytest.raises(ValueError):
            Calib(f=-1.0, b=0.5)
        with pytest.raises(ValueError):
            Calib(f=10.0, b=0.0)

    def test_halving_halves_focal_only(self, calib):
        half = calib.halved()
        assert half.f == calib.f / 2 and half.b == calib.b


class TestWarpCoord:
    def test_zero_inverse_depth_keeps_coordinate(self, calib):
        assert stereo.warp_coord(17.0, 0.0, calib, 1) == 17.0

    def test_direct_evaluation(self):
        c = Calib(f=100.0, b=1.0)
        assert stereo.warp_coord(50.0, 0.02, c, 1) == pytest.approx(48.0)

    def test_sign_symmetry(self, calib):
        rho = 0.07
        x = 31.0
        assert stereo.warp_coord(x, rho, calib, -1) == pytest.approx(
            stereo.warp_coord(x, -rho, calib, 1))

    def test_bad_sign_rejected(self, calib):
        with pytest.raises(ValueError):
            stereo.warp_coord(1.0, 0.1, calib, 2)


class TestBilinearSampling:
    def test_constant_image_constant_values(self):
        img = np.full((1, 1, 4, 6), 0.7)
        cx = stereo.column_grid((1, 1, 4, 6)) - 0.3
        out, mask = stereo.sample_bilinear(img, cx)
        assert np.all(out.data[mask] == pytest.approx(0.7))

    def test_integer_coordinates_exact(self):
        rng = np.random.default_rng(0)
        img = rng.random((1, 1, 3, 5))
        cx = stereo.column_grid((1, 1, 3, 5))
        out, mask = stereo.sample_bilinear(img, cx)
        assert mask.all()
        np.testing.assert_array_equal(out.data, img)

    def test_midway_between_two_and_six_is_four(self):
        img = np.array([[2.0, 6.0]]).reshape(1, 1, 1, 2)
        cx = np.full((1, 1, 1, 1), 0.5)
        # sample a 1x1 grid at column 0.5 of the 1x2 source
        out, mask = stereo.sample_bilinear(img, cx, np.zeros((1, 1, 1, 1)))
        assert mask.all()
        assert out.data.item() == pytest.approx(4.0)

    def test_out_of_range_masked_and_zeroed(self):
        img = np.ones((1, 1, 2, 4))
        cx = stereo.column_grid((1, 1, 2, 4)) - 1.5  # leftmost columns escape
        out, mask = stereo.sample_bilinear(img, cx)
        assert not mask[0, 0, :, 0].any() and not mask[0, 0, :, 1].any()
        assert mask[0, 0, :, 2:].all()
        assert np.all(out.data[~mask] == 0.0)

    def test_boundary_inclusive(self):
        img = np.ones((1, 1, 1, 3))
        for coord, ok in [(0.0, True), (2.0, True), (-1e-9, False),
                          (2.0 + 1e-9, False)]:
            cx = np.full((1, 1, 1, 1), coord)
            _, mask = stereo.sample_bilinear(img, cx, np.zeros((1, 1, 1, 1)))
            assert bool(mask.item()) is ok

    def test_gradients_flow_to_image_and_coords(self):
        rng = np.random.default_rng(1)
        img = Var.param(rng.random((1, 1, 4, 5)), name="img")
        # coordinates off the integer lattice so the kink is far away
        cx = Var.param(stereo.column_grid((1, 1, 4, 5)) - 0.37, name="cx")
        w = rng.normal(size=(1, 1, 4, 5))

        def f():
            out, _ = stereo.sample_bilinear(img, cx)
            return (out * w).sum()
        report = grad_check(f, {"img": img, "cx": cx}, eps=1e-5, tol=1e-6)
        assert report.passed, report.summary()


class TestGaussianSmoothing:
    def test_constant_preserved(self):
        img = np.full((1, 1, 5, 7), 0.42)
        out = stereo.gaussian_smooth_np(img, 1.0)
        np.testing.assert_allclose(out, img, rtol=1e-12)

    def test_impulse_normalized(self):
        img = np.zeros((1, 1, 15, 15))
        img[0, 0, 7, 7] = 1.0
        out = stereo.gaussian_smooth_np(img, 1.0)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)

    def test_kernel_matches_direct_formula(self):
        taps = stereo.gaussian_kernel(1.0)
        assert len(taps) == 7  # radius ceil(3*sigma) = 3
        xs = np.arange(-3, 4, dtype=float)
        direct = np.exp(-0.5 * xs ** 2)
        np.testing.assert_allclose(taps, direct / direct.sum(), rtol=1e-12)
        assert taps[3] == pytest.approx(0.39894 / (direct / np.sqrt(2 * np.pi)
                                                   ).sum(), rel=1e-3)

    def test_commutes_with_constant_offset(self):
        rng = np.random.default_rng(2)
        img = rng.random((1, 1, 6, 8))
        lhs = stereo.gaussian_smooth_np(img + 0.25, 1.0)
        rhs = stereo.gaussian_smooth_np(img, 1.0) + 0.25
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_sigma_validation(self):
        with pytest.raises(ValueError):
            stereo.gaussian_kernel(0.0)

    def test_smoothing_gradient(self):
        rng = np.random.default_rng(3)
        img = Var.param(rng.random((1, 1, 5, 6)), name="img")
        w = rng.normal(size=(1, 1, 5, 6))
        report = grad_check(
            lambda: (stereo.gaussian_smooth(img, 1.0) * w).sum(),
            {"img": img}, eps=1e-5, tol=1e-6)
        assert report.passed, report.summary()


class TestReconstructView:
    def test_zero_rho_returns_source(self, calib):
        rng = np.random.default_rng(4)
        src = rng.random((1, 1, 4, 8))
        out, mask = stereo.reconstruct_view(src, np.zeros((1, 1, 4, 8)),
                                            calib, 1)
        assert mask.all()
        np.testing.assert_array_equal(out.data, src)

    def test_huge_uniform_rho_empties_mask(self, calib):
        w = 8
        rho = np.full((1, 1, 4, w), (w / calib.fb) * 1.01)
        _, mask = stereo.reconstruct_view(np.ones((1, 1, 4, w)), rho, calib, 1)
        assert not mask.any()

    def test_round_trip_on_linear_image(self, calib):
        # constant rho, horizontally linear intensity: warping right then left
        # must reproduce the original at doubly-valid pixels
        h, w = 6, 32
        ramp = (0.2 + 0.02 * np.arange(w))[None, :] * np.ones((h, 1))
        I_l = ramp[None, None]
        rho = np.full((1, 1, h, w), 0.05)
        # right view of a linear ramp: shifted by fb*rho
        I_r = (0.2 + 0.02 * (np.arange(w) + calib.fb * 0.05))[None, :] \
            * np.ones((h, 1))
        I_r = I_r[None, None]
        rec_l, m_l = stereo.reconstruct_view(I_r, rho, calib, 1)
        np.testing.assert_allclose(rec_l.data[m_l], I_l[m_l], atol=1e-10)
        rec_r, m_r = stereo.reconstruct_view(I_l, rho, calib, -1)
        np.testing.assert_allclose(rec_r.data[m_r], I_r[m_r], atol=1e-10)

    def test_mask_monotone_in_uniform_rho(self, calib):
        w = 16
        src = np.ones((1, 1, 4, w))
        counts = []
        for rho_val in np.linspace(0.0, w / calib.fb, 9):
            _, mask = stereo.reconstruct_view(
                src, np.full((1, 1, 4, w), rho_val), calib, 1)
            counts.append(int(mask.sum()))
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_shape_mismatch_raises(self, calib):
        with pytest.raises(ValueError, match="spatial"):
            stereo.reconstruct_view(np.ones((1, 1, 4, 8)),
                                    np.zeros((1, 1, 4, 6)), calib, 1)


class TestResize:
    def test_identity_when_same_size(self):
        rng = np.random.default_rng(5)
        plane = rng.random((5, 7))
        np.testing.assert_allclose(stereo.resize_bilinear(plane, 5, 7), plane)

    def test_constant_preserved_on_upsample(self):
        plane = np.full((3, 4), 1.3)
        out = stereo.resize_bilinear(plane, 6, 8)
        np.testing.assert_allclose(out, 1.3)

    def test_linear_ramp_preserved(self):
        plane = np.arange(8.0)[None, :] * np.ones((4, 1))
        out = stereo.resize_bilinear(plane, 8, 16)
        # interior of an upsampled ramp stays linear with slope halved
        diffs = np.diff(out[2, 2:-2])
        np.testing.assert_allclose(diffs, diffs[0], atol=1e-12)
