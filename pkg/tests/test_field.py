import numpy as np
import pytest

from fbinerf.cameras import FisheyeCamera, PinholeCamera, fisheye_project
from fbinerf.costmap import cost_gradient_check
from fbinerf.errors import EmptySurface
from fbinerf.field import (
    Frame,
    Mesh,
    VoxelField,
    camera_rays,
    composite_backward,
    composite_samples,
    export_mesh,
    field_gradients,
    fit_field,
    load_field,
    read_obj,
    read_ply,
    render_image,
    render_ray,
    render_rays,
    sample_field,
    save_field,
    write_obj,
    write_ply,
)
from fbinerf.geometry import PoseSE3, Ray

BOUNDS = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def uniform_field(sigma=0.7, color=(0.2, 0.5, 0.8), res=(9, 9, 9)):
    f = VoxelField.zeros(res, BOUNDS)
    f.density[:] = sigma
    f.color[:] = color
    return f


def node_positions(field):
    axes = [
        np.linspace(field.bounds[0][a], field.bounds[1][a], field.resolution[a])
        for a in range(3)
    ]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


class TestVoxelField:
    def test_zeros_and_spacing(self):
        f = VoxelField.zeros((5, 9, 17), BOUNDS)
        assert f.density.shape == (5, 9, 17)
        assert f.color.shape == (5, 9, 17, 3)
        assert np.allclose(f.spacing, [0.5, 0.25, 0.125])

    def test_invariants_rejected(self):
        with pytest.raises(ValueError):
            VoxelField((5, 5, 5), BOUNDS, -np.ones((5, 5, 5)), np.zeros((5, 5, 5, 3)))
        with pytest.raises(ValueError):
            VoxelField((5, 5, 5), BOUNDS, np.zeros((5, 5, 5)), 2 * np.ones((5, 5, 5, 3)))
        with pytest.raises(ValueError):
            VoxelField.zeros((5, 5, 5), [[0, 0, 0], [1, 0, 1]])
        with pytest.raises(ValueError):
            VoxelField.zeros((1, 5, 5), BOUNDS)

    def test_copy_is_independent(self):
        f = uniform_field()
        g = f.copy()
        g.density[0, 0, 0] = 5.0
        assert f.density[0, 0, 0] == 0.7


class TestSampling:
    def test_exact_at_nodes(self):
        rng = np.random.default_rng(0)
        f = VoxelField(
            (5, 5, 5), BOUNDS, rng.uniform(1, 2, (5, 5, 5)), rng.uniform(size=(5, 5, 5, 3))
        )
        pos = node_positions(f)
        sigma, color = sample_field(f, pos.reshape(-1, 3))
        assert np.allclose(sigma, f.density.ravel(), atol=1e-12)
        assert np.allclose(color, f.color.reshape(-1, 3), atol=1e-12)

    def test_midpoint_averages_neighbors(self):
        f = VoxelField.zeros((3, 3, 3), BOUNDS)
        f.density[0, 1, 1] = 2.0
        f.density[1, 1, 1] = 4.0
        sigma, _ = sample_field(f, np.array([-0.5, 0.0, 0.0]))
        assert abs(sigma - 3.0) < 1e-12

    def test_zero_outside_bounds(self):
        sigma, color = sample_field(uniform_field(), np.array([2.0, 0.0, 0.0]))
        assert sigma == 0.0
        assert np.all(color == 0.0)


class TestCompositing:
    def test_weights_sum_to_opacity(self):
        rng = np.random.default_rng(1)
        sigmas = rng.uniform(0, 3, (4, 16))
        colors = rng.uniform(size=(4, 16, 3))
        deltas = rng.uniform(0.01, 0.2, (4, 16))
        ts = np.cumsum(deltas, axis=1)
        _, opacity, _, cache = composite_samples(sigmas, colors, deltas, ts)
        assert np.allclose(cache["weights"].sum(axis=1), opacity, atol=1e-15)
        assert np.allclose(opacity, 1.0 - np.prod(1.0 - cache["alphas"], axis=1), atol=1e-12)
        assert np.all(opacity <= 1.0)

    def test_opaque_slab_reaches_color(self):
        c = np.array([0.3, 0.6, 0.9])
        rgb, opacity, _, _ = composite_samples(
            np.full((1, 8), 50.0), np.tile(c, (1, 8, 1)), np.full((1, 8), 0.5),
            np.linspace(1, 4.5, 8)[None, :],
        )
        assert np.allclose(rgb[0], c, atol=1e-9)
        assert opacity[0] > 1.0 - 1e-9

    def test_split_interval_invariance(self):
        # constant sigma along the ray: halving one bin must not change the
        # composited color or opacity (telescoping transmittance)
        c = np.array([0.4, 0.2, 0.7])
        base = composite_samples(
            np.full((1, 2), 0.9), np.tile(c, (1, 2, 1)),
            np.array([[1.0, 1.0]]), np.array([[1.5, 2.5]]),
            background=(0.1, 0.1, 0.1),
        )
        split = composite_samples(
            np.full((1, 3), 0.9), np.tile(c, (1, 3, 1)),
            np.array([[0.5, 0.5, 1.0]]), np.array([[1.25, 1.75, 2.5]]),
            background=(0.1, 0.1, 0.1),
        )
        assert np.allclose(base[0], split[0], atol=1e-12)
        assert abs(base[1][0] - split[1][0]) < 1e-12

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        sigmas = rng.uniform(0.1, 2.0, (2, 6))
        colors = rng.uniform(size=(2, 6, 3))
        deltas = rng.uniform(0.05, 0.3, (2, 6))
        ts = np.cumsum(deltas, axis=1)
        g = rng.normal(size=(2, 3))
        bg = np.array([0.2, 0.3, 0.4])

        def value(s):
            rgb, _, _, _ = composite_samples(s, colors, deltas, ts, bg)
            return float((g * rgb).sum())

        _, _, _, cache = composite_samples(sigmas, colors, deltas, ts, bg)
        g_sigma, g_color = composite_backward(cache, g)
        eps = 1e-6
        for idx in [(0, 0), (0, 5), (1, 3)]:
            up, dn = sigmas.copy(), sigmas.copy()
            up[idx] += eps
            dn[idx] -= eps
            fd = (value(up) - value(dn)) / (2 * eps)
            assert abs(fd - g_sigma[idx]) < 1e-6 * max(1.0, abs(fd))
        assert np.allclose(g_color, cache["weights"][:, :, None] * g[:, None, :])


class TestRenderRay:
    def test_zero_field_returns_background(self):
        f = VoxelField.zeros((5, 5, 5), BOUNDS)
        ray = Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        rgb, opacity, _ = render_ray(f, ray, background=(0.9, 0.1, 0.2))
        assert np.allclose(rgb, [0.9, 0.1, 0.2])
        assert opacity == 0.0

    def test_uniform_box_matches_analytic_transmittance(self):
        f = uniform_field(sigma=0.7)
        ray = Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        rgb, opacity, _ = render_ray(f, ray, n_samples=16)
        expected = 1.0 - np.exp(-0.7 * 2.0)  # chord length 2 through the box
        assert abs(opacity - expected) < 1e-9
        assert np.allclose(rgb, expected * np.array([0.2, 0.5, 0.8]), atol=1e-9)

    def test_sample_refinement_converges(self):
        f = VoxelField.zeros((9, 9, 9), BOUNDS)
        pos = node_positions(f)
        f.density[:] = 2.0 * np.exp(-(pos**2).sum(axis=-1) / 0.18)
        f.color[:] = 0.6
        ray = Ray(np.array([0.1, -0.2, -3.0]), np.array([0.0, 0.05, 1.0]))
        a, _, _ = render_ray(f, ray, n_samples=64)
        b, _, _ = render_ray(f, ray, n_samples=128)
        assert np.max(np.abs(a - b)) < 1e-3

    def test_opaque_wall_expected_depth(self):
        f = uniform_field(sigma=400.0)
        ray = Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        _, opacity, depth = render_ray(f, ray, n_samples=64)
        assert opacity > 1.0 - 1e-12
        assert abs(depth - 2.0) < 2.0 / 64 + 1e-9  # entry at t = 2, first bin

    def test_miss_is_background(self):
        f = uniform_field()
        ray = Ray(np.array([5.0, 5.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        rgb, opacity, _ = render_ray(f, ray)
        assert opacity == 0.0 and np.all(rgb == 0.0)

    def test_invalid_arguments(self):
        f = uniform_field()
        ray = Ray(np.zeros(3) + [0, 0, -3.0], np.array([0.0, 0.0, 1.0]))
        with pytest.raises(ValueError):
            render_ray(f, ray, n_samples=1)
        with pytest.raises(ValueError):
            render_ray(f, ray, t_near=3.0, t_far=2.0)

    def test_explicit_range_matches_auto_on_enclosing_span(self):
        f = uniform_field(sigma=1.1)
        ray = Ray(np.array([0.0, 0.0, -3.0]), np.array([0.0, 0.0, 1.0]))
        auto = render_ray(f, ray, n_samples=32)
        manual = render_ray(f, ray, n_samples=32, t_near=2.0, t_far=4.0)
        assert np.allclose(auto[0], manual[0], atol=1e-9)


def cube_field(res=65, sigma=200.0):
    f = VoxelField.zeros((res, res, res), BOUNDS)
    pos = node_positions(f)
    inside = np.max(np.abs(pos), axis=-1) <= 0.5 + 1e-12
    f.density[inside] = sigma
    f.color[inside] = 1.0
    return f


class TestRenderImage:
    def test_zero_field_uniform_background(self):
        f = VoxelField.zeros((5, 5, 5), BOUNDS)
        cam = PinholeCamera(64.0, 64.0, 31.5, 31.5, 64, 64)
        img, depth = render_image(f, cam, PoseSE3(np.zeros(3), np.array([0, 0, -3.0])),
                                  background=(0.5, 0.5, 0.5))
        assert img.shape == (64, 64, 3)
        assert np.allclose(img, 0.5)
        assert np.all(depth == 0.0)

    def test_pinhole_cube_silhouette(self):
        f = cube_field()
        cam = PinholeCamera(64.0, 64.0, 31.5, 31.5, 64, 64)
        pose = PoseSE3(np.zeros(3), np.array([0.0, 0.0, -3.0]))
        origins, dirs = camera_rays(cam, pose)
        _, opacity, _, _ = render_rays(f, origins, dirs, n_samples=128)
        mask = opacity.reshape(64, 64) > 0.5
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        half = 64.0 * 0.5 / 2.5  # face half-extent over front-face depth
        for lo, hi in ((rows[0], rows[-1]), (cols[0], cols[-1])):
            assert abs(lo - (31.5 - half)) <= 1.0
            assert abs(hi - (31.5 + half)) <= 1.0

    def test_fisheye_cube_silhouette_matches_corner_projection(self):
        f = cube_field()
        intr = PinholeCamera(40.0, 40.0, 31.5, 31.5, 64, 64)
        cam = FisheyeCamera(intr, PoseSE3(np.zeros(3), np.array([0.0, 0.0, -3.0])),
                            0.1, 0.0, 0.0)
        origins, dirs = camera_rays(cam)
        _, opacity, _, _ = render_rays(f, origins.copy(), dirs, n_samples=128)
        mask = opacity.reshape(64, 64) > 0.5
        rows = np.where(mask.any(axis=1))[0]
        cols = np.where(mask.any(axis=0))[0]
        corners = np.array(
            [[sx * 0.5, sy * 0.5, -0.5] for sx in (-1, 1) for sy in (-1, 1)]
        )
        uv = fisheye_project(cam, corners)
        assert abs(cols[0] - uv[:, 0].min()) <= 1.0
        assert abs(cols[-1] - uv[:, 0].max()) <= 1.0
        assert abs(rows[0] - uv[:, 1].min()) <= 1.0
        assert abs(rows[-1] - uv[:, 1].max()) <= 1.0

    def test_center_ray_agrees_between_camera_models(self):
        f = uniform_field(sigma=0.9, color=(0.8, 0.3, 0.1))
        pose = PoseSE3(np.zeros(3), np.array([0.0, 0.0, -3.0]))
        pin = PinholeCamera(64.0, 64.0, 31.5, 31.5, 64, 64)
        intr = PinholeCamera(40.0, 40.0, 31.5, 31.5, 64, 64)
        fish = FisheyeCamera(intr, pose, 0.05, 0.0, 0.0)
        o_p, d_p = camera_rays(pin, pose)
        o_f, d_f = camera_rays(fish)
        # the principal direction is shared; compare an on-axis synthetic ray
        center = Ray(pose.t, np.array([0.0, 0.0, 1.0]))
        direct = render_ray(f, center, n_samples=64)[0]
        assert np.allclose(
            render_rays(f, o_p[:1] * 0 + pose.t, np.array([[0, 0, 1.0]]), 64)[0][0],
            direct, atol=1e-12,
        )
        assert o_f.shape == o_p.shape and d_f.shape == d_p.shape

    def test_pinhole_needs_pose(self):
        with pytest.raises(ValueError):
            camera_rays(PinholeCamera(64.0, 64.0, 31.5, 31.5, 64, 64))


class TestFieldGradients:
    def make_case(self):
        rng = np.random.default_rng(3)
        f = VoxelField(
            (4, 4, 4), BOUNDS,
            rng.uniform(0.2, 1.5, (4, 4, 4)),
            rng.uniform(0.2, 0.8, (4, 4, 4, 3)),
        )
        origins = np.array([[0.2, -0.1, -3.0], [-0.4, 0.3, -3.0], [0.0, 0.0, -2.5],
                            [0.5, 0.5, -3.0], [-0.2, -0.6, -2.8], [0.1, 0.4, -3.2],
                            [-0.5, 0.1, -3.0], [0.3, -0.3, -2.6]])
        dirs = np.tile([0.0, 0.0, 1.0], (8, 1)) + 0.05 * rng.normal(size=(8, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        gt = rng.uniform(size=(8, 3))
        return f, origins, dirs, gt

    def test_density_gradient_finite_differences(self):
        f, origins, dirs, gt = self.make_case()
        rng = np.random.default_rng(4)
        nodes = rng.choice(64, size=20, replace=False)

        def fn(vals):
            g = f.copy()
            g.density.ravel()[nodes] = vals
            loss, gd, _ = field_gradients(g, origins, dirs, gt, n_samples=32)
            return loss, gd.ravel()[nodes]

        assert cost_gradient_check(fn, f.density.ravel()[nodes], eps=1e-5) < 1e-4

    def test_color_gradient_finite_differences(self):
        f, origins, dirs, gt = self.make_case()
        rng = np.random.default_rng(5)
        nodes = rng.choice(64 * 3, size=20, replace=False)

        def fn(vals):
            g = f.copy()
            g.color.ravel()[nodes] = vals
            loss, _, gc = field_gradients(g, origins, dirs, gt, n_samples=32)
            return loss, gc.ravel()[nodes]

        assert cost_gradient_check(fn, f.color.ravel()[nodes], eps=1e-5) < 1e-4


class TestFitField:
    def test_single_cell_converges_to_frame_color(self):
        # opaque single cell seen by a narrow-FOV camera: only the colors
        # need fitting, so the rendered frame matches the target closely
        target = np.array([0.3, 0.45, 0.6])
        cam = PinholeCamera(48.0, 48.0, 7.5, 7.5, 16, 16)
        pose = PoseSE3(np.zeros(3), np.array([0.0, 0.0, -3.0]))
        frame = Frame(np.tile(target, (16, 16, 1)), cam, pose)
        f = VoxelField.zeros((2, 2, 2), BOUNDS)
        f.density[:] = 5.0
        f.color[:] = 0.5
        out = fit_field(f, [frame], iterations=200, lr=0.05, n_samples=16,
                        rays_per_batch=256)
        img, _ = render_image(out, cam, pose, n_samples=16)
        assert np.abs(img - target).max() < 1e-3

    def test_best_iterate_loss_non_increasing(self):
        rng = np.random.default_rng(6)
        cam = PinholeCamera(16.0, 16.0, 7.5, 7.5, 16, 16)
        poses = [
            PoseSE3(np.zeros(3), np.array([0.0, 0.0, -3.0])),
            PoseSE3(np.array([0.0, 0.3, 0.0]), np.array([-0.9, 0.0, -2.85])),
        ]
        truth = cube_field(res=17, sigma=50.0)
        truth.color[:] = rng.uniform(size=(17, 17, 17, 3))
        frames = [
            Frame(render_image(truth, cam, p, n_samples=32)[0], cam, p) for p in poses
        ]
        start = VoxelField.zeros((8, 8, 8), BOUNDS)
        start.density[:] = 0.01
        start.color[:] = 0.5
        losses = []
        fit_field(
            start, frames, iterations=100, lr=0.1,
            n_samples=32, rays_per_batch=512, eval_every=10,
            callback=lambda it, loss, f: losses.append(loss),
        )
        assert len(losses) >= 10
        best_so_far = np.minimum.accumulate(losses)
        assert best_so_far[-1] < losses[0]

    def test_requires_a_frame(self):
        with pytest.raises(ValueError):
            fit_field(VoxelField.zeros((2, 2, 2), BOUNDS), [], iterations=1)


def sphere_field(res=33, radius=0.25):
    f = VoxelField.zeros((res, res, res), BOUNDS)
    pos = node_positions(f)
    r = np.sqrt((pos**2).sum(axis=-1))
    f.density[:] = np.maximum(0.0, 1.0 - r / (2 * radius))
    f.color[:] = [0.8, 0.2, 0.1]
    return f


def edge_counts(faces):
    edges = {}
    for tri in faces:
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = tuple(sorted((int(tri[a]), int(tri[b]))))
            edges[key] = edges.get(key, 0) + 1
    return edges


class TestExportMesh:
    def test_sphere_vertex_radii(self):
        mesh = export_mesh(sphere_field(), iso_level=0.5)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        spacing = 2.0 / 32
        assert np.max(np.abs(radii - 0.25)) < spacing
        assert np.all((mesh.colors >= 0) & (mesh.colors <= 1))

    def test_sphere_mesh_is_closed_and_manifold(self):
        mesh = export_mesh(sphere_field(), iso_level=0.5)
        counts = edge_counts(mesh.faces)
        assert all(c == 2 for c in counts.values())
        euler = len(mesh.vertices) - len(counts) + len(mesh.faces)
        assert euler == 2  # genus 0

    def test_single_dense_node(self):
        f = VoxelField.zeros((7, 7, 7), BOUNDS)
        f.density[3, 3, 3] = 1.0
        mesh = export_mesh(f, iso_level=0.5)
        counts = edge_counts(mesh.faces)
        assert all(c == 2 for c in counts.values())
        assert len(mesh.vertices) - len(counts) + len(mesh.faces) == 2
        # vertices stay within the cells touching the lit node
        assert np.max(np.abs(mesh.vertices)) <= 2.0 / 6 + 1e-9

    def test_iso_above_max_raises(self):
        with pytest.raises(EmptySurface):
            export_mesh(sphere_field(), iso_level=5.0)

    def test_nonpositive_iso_rejected(self):
        with pytest.raises(ValueError):
            export_mesh(sphere_field(), iso_level=0.0)


class TestMeshIo:
    def test_obj_round_trip(self, tmp_path):
        mesh = export_mesh(sphere_field(res=17), iso_level=0.5)
        path = tmp_path / "surface.obj"
        write_obj(mesh, path)
        back = read_obj(path)
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
        assert np.array_equal(back.faces, mesh.faces)
        assert np.allclose(back.colors, mesh.colors, atol=1e-6)

    def test_ply_round_trip(self, tmp_path):
        mesh = export_mesh(sphere_field(res=17), iso_level=0.5)
        path = tmp_path / "surface.ply"
        write_ply(mesh, path)
        back = read_ply(path)
        assert np.allclose(back.vertices, mesh.vertices, atol=1e-12)
        assert np.array_equal(back.faces, mesh.faces)
        assert np.max(np.abs(back.colors - mesh.colors)) <= 0.5 / 255 + 1e-12

    def test_ply_is_binary_little_endian(self, tmp_path):
        mesh = Mesh(
            np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            np.array([[0, 1, 2]]),
            np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        )
        path = tmp_path / "tri.ply"
        write_ply(mesh, path)
        blob = path.read_bytes()
        assert b"format binary_little_endian 1.0" in blob
        assert blob.split(b"end_header\n", 1)[1]  # has a binary body


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        f = VoxelField(
            (4, 5, 6), BOUNDS, rng.uniform(0, 2, (4, 5, 6)), rng.uniform(size=(4, 5, 6, 3))
        )
        path = tmp_path / "field.vxf"
        save_field(f, path)
        g = load_field(path)
        assert g.resolution == f.resolution
        assert np.array_equal(g.bounds, f.bounds)
        assert np.array_equal(g.density, f.density)
        assert np.array_equal(g.color, f.color)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.vxf"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            load_field(path)
