"""Tests for synthetic scene generation and analytic ground-truth rendering."""

import numpy as np
import pytest

from fbinerf.cameras import FisheyeCamera, fisheye_project
from fbinerf.errors import InvalidSpec
from fbinerf.geometry import PoseSE3, geodesic_angle
from fbinerf.synth import (
    Box,
    Plane,
    PosedPinhole,
    SceneSpec,
    Sphere,
    SyntheticScene,
    generate_scene,
    look_at_pose,
    perturb_poses,
    render_all,
    render_ground_truth,
    scene_diameter,
    scene_rays,
    surface_color,
    value_noise,
)


def ring_spec(**overrides):
    base = dict(
        kind="fisheye",
        n_cameras=8,
        image_size=48,
        focal=30.0,
        distortion=(0.05, 0.0, 0.0),
        radius=3.0,
        height=1.5,
        primitives=(
            Sphere(center=(0.0, 0.0, 0.0), radius=1.0, seed=7),
            Plane(anchor=(0.0, -1.6, 0.0), normal=(0.0, 1.0, 0.0), seed=3),
        ),
        seed=42,
    )
    base.update(overrides)
    return SceneSpec(**base)


class TestTextures:
    def test_value_noise_bounds_and_determinism(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-5.0, 5.0, size=(500, 3))
        a = value_noise(pts, seed=11)
        b = value_noise(pts, seed=11)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert a.std() > 0.01  # actually varies

    def test_value_noise_seed_changes_field(self):
        pts = np.random.default_rng(1).uniform(-3, 3, size=(200, 3))
        assert not np.allclose(value_noise(pts, seed=1), value_noise(pts, seed=2))

    def test_surface_color_range(self):
        pts = np.random.default_rng(2).uniform(-4, 4, size=(300, 3))
        rgb = surface_color(pts, seed=5)
        assert rgb.shape == (300, 3)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_textureless_is_flat_gray(self):
        pts = np.random.default_rng(3).uniform(-2, 2, size=(50, 3))
        rgb = surface_color(pts, seed=5, textureless=True)
        assert np.array_equal(rgb, np.full((50, 3), 0.5))


class TestLookAt:
    def test_rotation_is_orthonormal_and_aims_at_target(self):
        pose = look_at_pose((1.0, 2.0, -3.0), (0.0, 0.0, 0.0))
        R = pose.rotation()
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
        fwd = R[:, 2]
        expect = -np.array([1.0, 2.0, -3.0])
        expect /= np.linalg.norm(expect)
        assert np.allclose(fwd, expect, atol=1e-12)

    def test_degenerate_target_rejected(self):
        with pytest.raises(ValueError):
            look_at_pose((1.0, 1.0, 1.0), (1.0, 1.0, 1.0))


class TestGenerateScene:
    def test_ring_has_45_degree_baselines(self):
        scene = generate_scene(ring_spec())
        centers = np.stack([c.pose.t for c in scene.cameras])
        hub = np.array([0.0, scene.spec.height, 0.0])  # ring axis point
        for i in range(8):
            a = centers[i] - hub
            b = centers[(i + 1) % 8] - hub
            cosang = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
            assert np.degrees(np.arccos(np.clip(cosang, -1, 1))) == pytest.approx(45.0, abs=1e-9)
        assert scene_diameter(scene.cameras) == pytest.approx(6.0, abs=1e-9)

    def test_bit_identical_regeneration(self):
        s1 = generate_scene(ring_spec())
        s2 = generate_scene(ring_spec())
        img1, dep1 = render_ground_truth(s1, 3)
        img2, dep2 = render_ground_truth(s2, 3)
        assert np.array_equal(img1, img2)
        assert np.array_equal(dep1, dep2)

    def test_different_texture_seeds_differ(self):
        a = generate_scene(ring_spec())
        prims = (Sphere((0.0, 0.0, 0.0), 1.0, seed=8),
                 Plane((0.0, -1.6, 0.0), (0.0, 1.0, 0.0), seed=4))
        b = generate_scene(ring_spec(primitives=prims))
        assert not np.array_equal(render_ground_truth(a, 0)[0], render_ground_truth(b, 0)[0])

    def test_no_primitives_rejected(self):
        with pytest.raises(InvalidSpec):
            generate_scene(ring_spec(primitives=()))

    def test_single_camera_rejected(self):
        with pytest.raises(InvalidSpec):
            generate_scene(ring_spec(n_cameras=1))

    def test_unknown_kind_rejected(self):
        with pytest.raises(InvalidSpec):
            generate_scene(ring_spec(kind="orthographic"))

    def test_unknown_layout_rejected(self):
        with pytest.raises(InvalidSpec):
            generate_scene(ring_spec(layout="grid"))

    def test_outward_facing_cameras_rejected(self):
        with pytest.raises(InvalidSpec, match="sees at most"):
            generate_scene(ring_spec(face_outward=True))

    def test_arc_layout_spans_requested_angle(self):
        spec = ring_spec(layout="arc", arc_degrees=90.0, n_cameras=4)
        scene = generate_scene(spec)
        centers = np.stack([c.pose.t for c in scene.cameras])
        hub = np.array([0.0, spec.height, 0.0])
        a = centers[0] - hub
        b = centers[-1] - hub
        cosang = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
        ang = np.degrees(np.arccos(np.clip(cosang, -1, 1)))
        assert ang == pytest.approx(90.0, abs=1e-9)

    def test_pinhole_kind_builds_posed_pinholes(self):
        scene = generate_scene(ring_spec(kind="pinhole", distortion=(0, 0, 0)))
        assert all(isinstance(c, PosedPinhole) for c in scene.cameras)
        assert len(scene.poses) == 8


class TestRenderGroundTruth:
    def head_on_scene(self, kind):
        spec = ring_spec(
            kind=kind,
            n_cameras=2,
            image_size=17,
            focal=20.0,
            distortion=(0.05, 0.0, 0.0) if kind == "fisheye" else (0, 0, 0),
            radius=2.0,
            height=0.0,
            primitives=(Plane((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), seed=1),),
        )
        return generate_scene(spec)

    def test_head_on_plane_depth_is_distance_pinhole(self):
        scene = self.head_on_scene("pinhole")
        _, depth = render_ground_truth(scene, 0)
        assert depth[8, 8] == pytest.approx(2.0, abs=1e-12)

    def test_head_on_plane_depth_is_distance_fisheye(self):
        scene = self.head_on_scene("fisheye")
        _, depth = render_ground_truth(scene, 0)
        assert depth[8, 8] == pytest.approx(2.0, abs=1e-12)

    def test_sphere_center_depth_is_distance_minus_radius(self):
        spec = ring_spec(
            n_cameras=2,
            image_size=33,
            radius=3.0,
            height=0.0,
            primitives=(
                Sphere((0.0, 0.0, 0.0), 1.0, seed=2),
                Plane((0.0, 0.0, -2.0), (0.0, 0.0, 1.0), seed=9),
            ),
        )
        scene = generate_scene(spec)
        # camera 0 sits at (0, 0, 3) looking down -z through the sphere center
        assert np.allclose(scene.cameras[0].pose.t, [0.0, 0.0, 3.0], atol=1e-12)
        _, depth = render_ground_truth(scene, 0)
        assert depth[16, 16] == pytest.approx(3.0 - 1.0, abs=1e-12)

    def test_box_front_face_depth(self):
        spec = ring_spec(
            n_cameras=2,
            image_size=33,
            radius=3.0,
            height=0.0,
            primitives=(
                Box((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), seed=4),
                Plane((0.0, 0.0, -2.0), (0.0, 0.0, 1.0), seed=9),
            ),
        )
        scene = generate_scene(spec)
        _, depth = render_ground_truth(scene, 0)
        assert depth[16, 16] == pytest.approx(2.5, abs=1e-12)

    def test_miss_gets_background_and_infinite_depth(self):
        spec = ring_spec(
            n_cameras=2,
            image_size=33,
            radius=3.0,
            background=(0.2, 0.3, 0.4),
            min_visible_fraction=0.01,
            primitives=(Sphere((0.0, 0.0, 0.0), 1.0, seed=2),),
        )
        scene = generate_scene(spec)
        image, depth = render_ground_truth(scene, 0)
        corner_missed = ~np.isfinite(depth[0, 0])
        assert corner_missed
        assert np.allclose(image[0, 0], [0.2, 0.3, 0.4])
        assert np.isfinite(depth[16, 16])

    def test_camera_object_and_index_agree(self):
        scene = generate_scene(ring_spec())
        by_index = render_ground_truth(scene, 2)
        by_object = render_ground_truth(scene, scene.cameras[2])
        assert np.array_equal(by_index[0], by_object[0])

    def test_foreign_camera_rejected(self):
        scene = generate_scene(ring_spec())
        intr = scene.cameras[0].intrinsics
        stranger = FisheyeCamera(intr, PoseSE3(np.zeros(3), [9.0, 9.0, 9.0]), 0.05)
        with pytest.raises(ValueError):
            render_ground_truth(scene, stranger)

    def test_render_all_covers_every_camera(self):
        scene = generate_scene(ring_spec(n_cameras=3))
        images, depths = render_all(scene)
        assert len(images) == 3 and len(depths) == 3
        assert images[0].shape == (48, 48, 3)

    def test_projection_depth_consistency(self):
        """A hit point reprojects onto its own pixel with matching depth."""
        scene = generate_scene(ring_spec(image_size=32))
        cam = scene.cameras[1]
        origins, dirs = scene_rays(scene, 1)
        _, depth = render_ground_truth(scene, 1)
        depth = depth.ravel()
        hit = np.isfinite(depth)
        idx = np.flatnonzero(hit)[::37]
        pts = origins[idx] + depth[idx, None] * dirs[idx]
        uv = fisheye_project(cam, pts)
        s = scene.spec.image_size
        u_true = (idx % s).astype(float)
        v_true = (idx // s).astype(float)
        scale = max(s - 1.0, 1.0)
        assert np.max(np.abs(uv[:, 0] - u_true)) / scale < 1e-6
        assert np.max(np.abs(uv[:, 1] - v_true)) / scale < 1e-6


class TestPerturbPoses:
    def make_cameras(self):
        return list(generate_scene(ring_spec()).cameras)

    def test_rotation_magnitude_exact(self):
        cams = self.make_cameras()
        noisy = perturb_poses(cams, rot_deg=3.0, trans_frac=0.02, seed=5)
        for before, after in zip(cams, noisy):
            ang = geodesic_angle(before.pose.rotation(), after.pose.rotation())
            assert np.degrees(ang) == pytest.approx(3.0, abs=1e-9)

    def test_translation_magnitude_exact(self):
        cams = self.make_cameras()
        diam = scene_diameter(cams)
        noisy = perturb_poses(cams, rot_deg=1.0, trans_frac=0.02, seed=5)
        for before, after in zip(cams, noisy):
            shift = np.linalg.norm(after.pose.t - before.pose.t)
            assert shift == pytest.approx(0.02 * diam, abs=1e-12)

    def test_deterministic_and_seed_sensitive(self):
        cams = self.make_cameras()
        a = perturb_poses(cams, 2.0, 0.01, seed=3)
        b = perturb_poses(cams, 2.0, 0.01, seed=3)
        c = perturb_poses(cams, 2.0, 0.01, seed=4)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.pose.phi, pb.pose.phi)
            assert np.array_equal(pa.pose.t, pb.pose.t)
        assert not np.allclose(a[0].pose.t, c[0].pose.t)

    def test_zero_perturbation_is_identity(self):
        cams = self.make_cameras()
        out = perturb_poses(cams, 0.0, 0.0, seed=1)
        for before, after in zip(cams, out):
            assert np.array_equal(before.pose.phi, after.pose.phi)
            assert np.array_equal(before.pose.t, after.pose.t)

    def test_accepts_bare_poses(self):
        poses = [PoseSE3(np.zeros(3), [0, 0, 0]), PoseSE3(np.zeros(3), [4.0, 0, 0])]
        out = perturb_poses(poses, 2.0, 0.1, seed=0)
        assert isinstance(out[0], PoseSE3)
        assert np.linalg.norm(out[0].t - poses[0].t) == pytest.approx(0.4, abs=1e-12)

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ValueError):
            perturb_poses(self.make_cameras(), -1.0, 0.0, seed=0)


class TestInvariants:
    def test_scene_is_frozen_dataclass(self):
        scene = generate_scene(ring_spec(n_cameras=2))
        with pytest.raises(AttributeError):
            scene.primitives = ()

    def test_visibility_respects_threshold_override(self):
        spec = ring_spec(
            n_cameras=2,
            radius=3.0,
            primitives=(Sphere((0.0, 0.0, 0.0), 1.0, seed=2),),
        )
        with pytest.raises(InvalidSpec):
            generate_scene(spec)  # a small lone sphere covers far less than 50%
        ok = SceneSpec(**{**spec.__dict__, "min_visible_fraction": 0.01})
        assert isinstance(generate_scene(ok), SyntheticScene)
