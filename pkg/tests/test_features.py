import numpy as np
import pytest

from fbinerf.cameras import PinholeCamera, pinhole_project, pinhole_unproject
from fbinerf.errors import (
    DegenerateConfiguration,
    ImageTooSmall,
    NotEnoughViews,
    OutOfBounds,
)
from fbinerf.features import (
    FeatureConfig,
    bilinear_sample,
    bilinear_sample_with_grad,
    epipolar_residual,
    extract_features,
    global_descriptor,
    neighbor_select,
    sample_feature,
)
from fbinerf.geometry import PoseSE3, transform_point


def random_texture(seed=0, size=64, blur=0.0):
    rng = np.random.default_rng(seed)
    img = rng.uniform(size=(size, size))
    if blur > 0:
        from scipy.ndimage import gaussian_filter

        img = gaussian_filter(img, blur, mode="wrap")
    return np.repeat(img[:, :, None], 3, axis=2)


class TestExtractFeatures:
    def test_constant_image_has_zero_gradient_channels(self):
        pyr = extract_features(np.full((64, 64, 3), 0.37))
        # channels: gray, blur, gx, gy, four contrast channels
        for c in range(2, 8):
            assert np.max(np.abs(pyr.levels[0][:, :, c])) == 0.0

    def test_vertical_step_edge(self):
        img = np.zeros((64, 64, 3))
        img[:, 32:] = 1.0
        pyr = extract_features(img)
        gx = pyr.levels[0][:, :, 2]
        gy = pyr.levels[0][:, :, 3]
        peak_col = int(np.argmax(np.abs(gx[32])))
        assert peak_col in (31, 32)
        assert np.max(np.abs(gy)) == 0.0

    def test_shift_equivariance_wrap(self):
        cfg = FeatureConfig(boundary="wrap")
        img = random_texture(1)
        rolled = np.roll(img, 4, axis=1)
        a = extract_features(img, cfg)
        b = extract_features(rolled, cfg)
        expect = np.roll(a.levels[0], 4, axis=1)
        assert np.max(np.abs(b.levels[0] - expect)) < 1e-6

    def test_channels_standardized(self):
        pyr = extract_features(random_texture(2))
        for lvl in pyr.levels:
            for c in range(lvl.shape[2]):
                chan = lvl[:, :, c]
                assert abs(chan.mean()) < 1e-6
                assert 1 - 1e-3 < chan.var() < 1 + 1e-3

    def test_all_channels_finite(self):
        pyr = extract_features(random_texture(3))
        for lvl in pyr.levels:
            assert np.all(np.isfinite(lvl))
        assert np.all(np.isfinite(pyr.contextual))

    def test_level_resolutions_halve(self):
        pyr = extract_features(random_texture(4))
        shapes = [lvl.shape[:2] for lvl in pyr.levels]
        assert shapes == [(64, 64), (32, 32), (16, 16)]
        assert pyr.contextual.shape[:2] == (16, 16)

    def test_small_image_rejected(self):
        with pytest.raises(ImageTooSmall):
            extract_features(np.zeros((16, 16, 3)))

    def test_deterministic(self):
        img = random_texture(5)
        a = extract_features(img)
        b = extract_features(img)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la, lb)
        np.testing.assert_array_equal(a.contextual, b.contextual)

    def test_identical_neighborhoods_identical_features(self):
        # two copies of the same 17x17 patch pasted far apart must produce
        # identical center feature vectors (all ops are local + global affine)
        rng = np.random.default_rng(6)
        img = rng.uniform(size=(64, 64))
        patch = rng.uniform(size=(17, 17))
        img[8:25, 8:25] = patch
        img[38:55, 38:55] = patch
        pyr = extract_features(np.repeat(img[:, :, None], 3, axis=2))
        fa = pyr.levels[0][16, 16]
        fb = pyr.levels[0][46, 46]
        np.testing.assert_allclose(fa, fb, atol=1e-12)


class TestSampling:
    def test_integer_coordinates_exact(self):
        pyr = extract_features(random_texture(7))
        for u, v in [(0, 0), (10, 20), (63, 63), (63, 0)]:
            got = sample_feature(pyr, 0, np.array([float(u), float(v)]))
            np.testing.assert_array_equal(got, pyr.levels[0][v, u])

    def test_midpoint_average(self):
        grid = np.zeros((2, 2))
        grid[0, 0], grid[0, 1] = 3.0, 5.0
        s, valid = bilinear_sample(grid, np.array([0.5, 0.0]))
        assert valid
        assert s == 4.0

    def test_random_subpixel_matches_scalar_oracle(self):
        def scalar_bilinear(img, u, v):
            u0, v0 = int(np.floor(u)), int(np.floor(v))
            fu, fv = u - u0, v - v0
            return (
                img[v0, u0] * (1 - fu) * (1 - fv)
                + img[v0, u0 + 1] * fu * (1 - fv)
                + img[v0 + 1, u0] * (1 - fu) * fv
                + img[v0 + 1, u0 + 1] * fu * fv
            )

        pyr = extract_features(random_texture(8))
        lvl = pyr.levels[0]
        rng = np.random.default_rng(9)
        for _ in range(50):
            u = rng.uniform(0, 62.999)
            v = rng.uniform(0, 62.999)
            got = sample_feature(pyr, 0, np.array([u, v]))
            want = np.array([scalar_bilinear(lvl[:, :, c], u, v) for c in range(8)])
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_out_of_bounds_raises(self):
        pyr = extract_features(random_texture(10))
        with pytest.raises(OutOfBounds):
            sample_feature(pyr, 0, np.array([64.0, 10.0]))
        with pytest.raises(OutOfBounds):
            sample_feature(pyr, 0, np.array([-0.5, 10.0]))

    def test_mask_flags_outside_points(self):
        grid = np.arange(16.0).reshape(4, 4)
        uv = np.array([[1.0, 1.0], [3.5, 1.0], [1.0, -0.2]])
        s, valid = bilinear_sample(grid, uv)
        assert valid.tolist() == [True, False, False]
        assert s[1] == 0.0 and s[2] == 0.0

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(11)
        grid = rng.uniform(size=(16, 16, 3))
        uv = np.stack(
            [rng.uniform(1.1, 14.4, size=30), rng.uniform(1.1, 14.4, size=30)], axis=-1
        )
        s, grad, valid = bilinear_sample_with_grad(grid, uv)
        assert valid.all()
        s0, _ = bilinear_sample(grid, uv)
        np.testing.assert_allclose(s, s0, atol=1e-15)
        eps = 1e-7
        for axis in range(2):
            d = np.zeros(2)
            d[axis] = eps
            sp, _ = bilinear_sample(grid, uv + d)
            sm, _ = bilinear_sample(grid, uv - d)
            np.testing.assert_allclose(grad[:, :, axis], (sp - sm) / (2 * eps), atol=1e-6)


class TestNeighborSelect:
    def test_duplicate_ranks_first(self):
        imgs = [random_texture(s, blur=3.0) for s in (20, 21, 22)]
        imgs.append(imgs[0].copy())
        desc = [global_descriptor(extract_features(im)) for im in imgs]
        assert neighbor_select(desc, 0, 1) == [3]

    def test_k_equals_all_others(self):
        desc = [global_descriptor(extract_features(random_texture(s, blur=3.0))) for s in range(4)]
        got = neighbor_select(desc, 1, 3)
        assert sorted(got) == [0, 2, 3]

    def test_monotone_shift_ranking(self):
        base = random_texture(23, blur=3.0)
        views = [base, np.roll(base, 2, axis=1), np.roll(base, 5, axis=1), np.roll(base, 9, axis=1)]
        cfg = FeatureConfig(boundary="wrap")
        desc = [global_descriptor(extract_features(v, cfg)) for v in views]
        assert neighbor_select(desc, 0, 3) == [1, 2, 3]

    def test_tie_break_ascending_id(self):
        a = global_descriptor(extract_features(random_texture(24)))
        b = global_descriptor(extract_features(random_texture(25)))
        desc = [a, b, b.copy()]
        assert neighbor_select(desc, 0, 2) == [1, 2]

    def test_not_enough_views(self):
        desc = [np.ones(4), np.ones(4)]
        with pytest.raises(NotEnoughViews):
            neighbor_select(desc, 0, 2)


def make_matches(rel: PoseSE3, cam1, cam2, n=24, seed=0):
    """Pixel pairs consistent with rel mapping camera-1 coords to camera-2 coords."""
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        u = rng.uniform(5, 58)
        v = rng.uniform(5, 58)
        p1 = pinhole_unproject(cam1, u, v, rng.uniform(1.5, 4.0))
        p2 = transform_point(rel, p1)
        if p2[2] <= 0.1:
            continue
        uv2 = pinhole_project(cam2, p2)
        if not cam2.contains(uv2[0], uv2[1]):
            continue
        pairs.append(((u, v), tuple(uv2)))
    return pairs


class TestEpipolarResidual:
    def setup_method(self):
        self.cam = PinholeCamera(70.0, 70.0, 31.5, 31.5, 64, 64)
        self.rel = PoseSE3(np.array([0.02, -0.03, 0.01]), np.array([0.4, 0.05, 0.02]))

    def test_exact_matches_near_zero(self):
        matches = make_matches(self.rel, self.cam, self.cam)
        r = epipolar_residual(self.rel, matches, (self.cam, self.cam))
        assert r < 1e-8

    def test_perturbed_pose_is_worse(self):
        matches = make_matches(self.rel, self.cam, self.cam)
        r0 = epipolar_residual(self.rel, matches, (self.cam, self.cam))
        bad = PoseSE3(self.rel.phi + np.array([0.0, np.deg2rad(5.0), 0.0]), self.rel.t)
        r1 = epipolar_residual(bad, matches, (self.cam, self.cam))
        assert r1 > r0
        assert r1 > 1e-6

    def test_too_few_matches(self):
        matches = make_matches(self.rel, self.cam, self.cam)[:7]
        with pytest.raises(DegenerateConfiguration):
            epipolar_residual(self.rel, matches, (self.cam, self.cam))

    def test_zero_baseline_rejected(self):
        matches = make_matches(self.rel, self.cam, self.cam)
        rot_only = PoseSE3(np.array([0.0, 0.1, 0.0]), np.zeros(3))
        with pytest.raises(DegenerateConfiguration):
            epipolar_residual(rot_only, matches, (self.cam, self.cam))
