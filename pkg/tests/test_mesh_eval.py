import numpy as np
import pytest

from fieldslam.field import FieldConfig, eval_depth, init_field_params
from fieldslam.geometry import PointCloud, Pose, rotation_exp
from fieldslam.losses import LossConfig, LossMode
from fieldslam.mapping import MapperConfig, make_keyframe, optimize_window
from fieldslam.mesh_eval import (
    MapMetrics,
    Mesh,
    ape,
    extract_mesh,
    l1_depth,
    map_metrics,
    mesh_to_pointcloud,
    read_depth_pgm,
    write_depth_pgm,
    write_metrics,
)
from fieldslam.ply import read_ply, write_ply
from fieldslam.sim import (
    BVH,
    Dataset,
    LidarModel,
    LidarScan,
    cast_scan,
    generate_sequence,
    get_scene,
)
from fieldslam.tracking import TrackedFrame, segment_sky

MODEL = LidarModel(
    azimuth_count=120,
    elevation_angles=tuple(np.deg2rad(np.linspace(-15.0, 15.0, 10))),
)
SCENE = get_scene("box_room")
TREE = BVH(SCENE.triangles)
FC = FieldConfig(levels=3, table_size=2**13, mlp_width=32)
CENTER = Pose(np.eye(3), np.array([0.0, 0.0, 1.3]))

_trained: dict = {}


def trained_field():
    """Field overfit to one central box-room scan; shared across tests."""
    if not _trained:
        params = init_field_params(FC, np.random.default_rng(0))
        lc = LossConfig(alpha=0.3)
        scan = cast_scan(SCENE, CENTER, MODEL, 0.0, bvh=TREE)
        frame = TrackedFrame(scan, CENTER, CENTER, segment_sky(scan, CENTER, MODEL), None)
        kf = make_keyframe(frame, 0, lc, LossMode.JS_DYNAMIC)
        cfg = MapperConfig(n_rays=64, n_samples=64, iters_per_kf=500, optimize_poses=False)
        optimize_window(
            [kf], params, cfg, lc, FC, LossMode.JS_DYNAMIC,
            rng_seed=1, t_near=MODEL.min_range, weight_formula="alpha",
        )
        _trained["params"] = params
    return _trained["params"]


def box_wall_distance(p: np.ndarray) -> np.ndarray:
    """Exact distance to the boundary of the 10 x 10 x 3 room."""
    c = np.array([0.0, 0.0, 1.5])
    h = np.array([5.0, 5.0, 1.5])
    q = np.abs(p - c) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return np.abs(outside + inside)


class TestMeshType:
    def test_rejects_out_of_range_indices(self):
        v = np.zeros((3, 3))
        with pytest.raises(ValueError):
            Mesh(v, np.array([[0, 1, 3]]))
        with pytest.raises(ValueError):
            Mesh(v, np.array([[-1, 1, 2]]))

    def test_empty_is_fine(self):
        m = Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        assert len(m) == 0


class TestExtractMesh:
    def test_untrained_field_gives_near_empty_mesh(self):
        params = init_field_params(FC, np.random.default_rng(7))
        m = extract_mesh(params, FC, [CENTER], MODEL, weight_formula="alpha")
        assert len(m) < 10

    def test_overfit_box_room_vertices_on_walls(self):
        params = trained_field()
        m = extract_mesh(params, FC, [CENTER], MODEL, voxel=0.1, weight_formula="alpha")
        assert len(m) > 100
        d = box_wall_distance(m.vertices)
        assert np.mean(d < 0.2) >= 0.9  # within 2 voxels

    def test_duplicate_poses_change_nothing(self):
        params = trained_field()
        m1 = extract_mesh(params, FC, [CENTER], MODEL, weight_formula="alpha")
        m2 = extract_mesh(params, FC, [CENTER, CENTER], MODEL, weight_formula="alpha")
        np.testing.assert_array_equal(m1.vertices, m2.vertices)
        np.testing.assert_array_equal(m1.triangles, m2.triangles)

    def test_requires_a_pose(self):
        with pytest.raises(ValueError):
            extract_mesh(trained_field(), FC, [], MODEL)

    def test_ply_roundtrip(self, tmp_path):
        params = trained_field()
        m = extract_mesh(params, FC, [CENTER], MODEL, weight_formula="alpha")
        write_ply(tmp_path / "mesh.ply", m.vertices, m.triangles)
        v, f = read_ply(tmp_path / "mesh.ply")
        np.testing.assert_allclose(v, m.vertices, atol=1e-9)
        np.testing.assert_array_equal(f, m.triangles)


class TestMeshToPointcloud:
    def quad(self):
        v = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]])
        return Mesh(v, np.array([[0, 1, 2], [0, 2, 3]]))

    def test_points_lie_on_surface(self):
        pts = mesh_to_pointcloud(self.quad(), voxel=0.1)
        assert len(pts) == 100  # area 1 / 0.1^2
        np.testing.assert_allclose(pts[:, 2], 0.0, atol=1e-12)
        assert (pts[:, :2] >= -1e-12).all() and (pts[:, :2] <= 1 + 1e-12).all()

    def test_empty_mesh(self):
        m = Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64))
        assert mesh_to_pointcloud(m).shape == (0, 3)

    def test_deterministic(self):
        a = mesh_to_pointcloud(self.quad(), voxel=0.2, seed=5)
        b = mesh_to_pointcloud(self.quad(), voxel=0.2, seed=5)
        np.testing.assert_array_equal(a, b)


def line_traj(n=10, start=0.0):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        pos = np.array([0.3 * i, 0.1 * i**1.5, 0.05 * i])
        rot = rotation_exp(rng.normal(scale=0.1, size=3))
        out.append((start + 0.2 * i, Pose(rot, pos)))
    return out


def transform_traj(traj, rot, t):
    return [(s, Pose(rot @ p.rotation, rot @ p.translation + t)) for s, p in traj]


class TestApe:
    def test_identical_is_zero(self):
        traj = line_traj()
        assert ape(traj, traj) < 1e-12

    def test_rigid_transform_is_removed(self):
        gt = line_traj()
        rot = rotation_exp(np.array([0.3, -0.2, 0.9]))
        est = transform_traj(gt, rot, np.array([4.0, -2.0, 1.0]))
        assert ape(est, gt) < 1e-9

    def test_rigid_invariance_with_noise(self):
        gt = line_traj()
        rng = np.random.default_rng(3)
        est = [
            (s, Pose(p.rotation, p.translation + rng.normal(scale=0.05, size=3)))
            for s, p in gt
        ]
        base = ape(est, gt)
        rot = rotation_exp(np.array([-0.7, 0.4, 0.2]))
        moved = transform_traj(est, rot, np.array([1.0, 2.0, -3.0]))
        assert abs(ape(moved, gt) - base) < 1e-9

    def test_constructed_residual_value(self):
        # cube corners with a parity-signed x-perturbation: the cross terms
        # vanish, so alignment is the identity and every residual is 0.1
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        gt = [(float(i), Pose(np.eye(3), signs[i])) for i in range(8)]
        est = [
            (float(i), Pose(np.eye(3), signs[i] + np.array([0.1, 0.0, 0.0]) * np.prod(signs[i])))
            for i in range(8)
        ]
        np.testing.assert_allclose(ape(est, gt), 0.1, atol=1e-12)

    def test_too_few_associations(self):
        gt = line_traj()
        est = [(s + 100.0, p) for s, p in line_traj()]  # stamps never match
        with pytest.raises(ValueError):
            ape(est, gt)

    def test_association_tolerates_small_offsets(self):
        gt = line_traj()
        est = [(s + 0.04, p) for s, p in gt]  # within max_dt = 0.1
        assert ape(est, gt) < 1e-9


def grid_cloud(n=40, spacing=1.0):
    g = np.arange(n, dtype=np.float64) * spacing
    xx, yy = np.meshgrid(g[: n // 4], g[:4])
    return np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])


class TestMapMetrics:
    def test_identical_clouds(self):
        pts = grid_cloud()
        mm = map_metrics(pts, PointCloud(pts))
        assert mm.accuracy == 0.0 and mm.completion == 0.0
        assert mm.precision == 1.0 and mm.recall == 1.0

    def test_uniform_shift(self):
        gt = grid_cloud()
        est = gt + np.array([0.05, 0.0, 0.0])
        mm = map_metrics(est, gt, threshold=0.1, voxel=0.05)
        assert abs(mm.accuracy - 0.05) < 1e-9
        assert abs(mm.completion - 0.05) < 1e-9
        assert mm.precision == 1.0 and mm.recall == 1.0

    def test_half_subset(self):
        gt = grid_cloud()
        est = gt[: len(gt) // 2]
        mm = map_metrics(est, gt, threshold=0.1)
        assert mm.precision == 1.0
        assert abs(mm.recall - 0.5) < 1e-12
        assert mm.accuracy == 0.0

    def test_swap_symmetry_exact(self):
        rng = np.random.default_rng(11)
        a = rng.uniform(0, 4, size=(300, 3))
        b = rng.uniform(0, 4, size=(200, 3))
        ab = map_metrics(a, b)
        ba = map_metrics(b, a)
        assert ab.accuracy == ba.completion
        assert ab.completion == ba.accuracy
        assert ab.precision == ba.recall
        assert ab.recall == ba.precision

    def test_empty_cloud_rejected(self):
        with pytest.raises(ValueError):
            map_metrics(np.zeros((0, 3)), grid_cloud())

    def test_overfit_room_against_simulator_map(self):
        params = trained_field()
        mesh = extract_mesh(params, FC, [CENTER], MODEL, voxel=0.1, weight_formula="alpha")
        pts = mesh_to_pointcloud(mesh, voxel=0.1, seed=0)
        ds = generate_sequence(SCENE, [(0.0, CENTER), (1.0, CENTER)], MODEL, seed=0)
        mm = map_metrics(pts, ds.gt_map, threshold=0.1)
        assert mm.recall >= 0.8
        assert mm.completion <= 0.1


def tiny_dataset():
    model = LidarModel(
        azimuth_count=60, elevation_angles=tuple(np.deg2rad(np.linspace(-12.0, 12.0, 4)))
    )
    return generate_sequence(SCENE, [(0.0, CENTER), (0.4, CENTER)], model, seed=0), model


class TestL1Depth:
    def rendered_copy(self, ds, params, bias=0.0):
        """Dataset whose ranges are exactly what the field renders (+bias)."""
        scans = []
        for scan, (stamp, pose) in zip(ds.scans, ds.gt_trajectory):
            valid = scan.valid
            dirs = scan.directions[valid] @ pose.rotation.T
            origins = np.broadcast_to(pose.translation, dirs.shape)
            depth, _ = eval_depth(
                origins, dirs, params, FC, t_near=ds.lidar.min_range
            )
            ranges = scan.ranges.copy()
            ranges[valid] = depth + bias
            scans.append(
                LidarScan(scan.directions, ranges, scan.timestamps,
                          scan.az_idx, scan.el_idx, scan.stamp)
            )
        return Dataset(scans, ds.gt_trajectory, ds.gt_map, ds.lidar, ds.scene_name)

    def test_exact_depths_give_zero(self):
        ds, _ = tiny_dataset()
        params = init_field_params(FC, np.random.default_rng(2))
        exact = self.rendered_copy(ds, params)
        assert l1_depth(params, FC, exact, exact.gt_trajectory, n_scans=2) == 0.0

    def test_constant_bias_is_recovered(self):
        ds, _ = tiny_dataset()
        params = init_field_params(FC, np.random.default_rng(2))
        biased = self.rendered_copy(ds, params, bias=0.2)
        np.testing.assert_allclose(
            l1_depth(params, FC, biased, biased.gt_trajectory, n_scans=2), 0.2, atol=1e-12
        )

    def test_matches_independent_recomputation(self):
        ds, _ = tiny_dataset()
        params = init_field_params(FC, np.random.default_rng(4))
        got = l1_depth(params, FC, ds, ds.gt_trajectory, n_scans=1, seed=9)

        rng = np.random.default_rng(9)
        i = int(np.sort(rng.choice(len(ds.scans), size=1, replace=False))[0])
        scan = ds.scans[i]
        stamps = np.array([t for t, _ in ds.gt_trajectory])
        pose = ds.gt_trajectory[int(np.argmin(np.abs(stamps - scan.stamp)))][1]
        valid = scan.valid
        dirs = scan.directions[valid] @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        depth, _ = eval_depth(origins, dirs, params, FC, t_near=ds.lidar.min_range)
        want = float(np.abs(depth - scan.ranges[valid]).mean())
        assert got == want

    def test_missing_pose_is_an_error(self):
        ds, _ = tiny_dataset()
        params = init_field_params(FC, np.random.default_rng(2))
        late = [(t + 50.0, p) for t, p in ds.gt_trajectory]
        with pytest.raises(ValueError):
            l1_depth(params, FC, ds, late, n_scans=2)
        with pytest.raises(ValueError):
            l1_depth(params, FC, ds, [], n_scans=2)


class TestDepthPgm:
    def test_roundtrip_with_invalid_pixels(self, tmp_path):
        rng = np.random.default_rng(0)
        depth = rng.uniform(0.3, 40.0, size=(6, 9))
        valid = rng.random((6, 9)) > 0.3
        path = tmp_path / "depth.pgm"
        write_depth_pgm(path, depth, valid)
        back, back_valid = read_depth_pgm(path)
        np.testing.assert_array_equal(back_valid, valid)
        np.testing.assert_allclose(back[valid], depth[valid], atol=5e-4)  # mm quantization
        assert (back[~valid] == 0.0).all()

    def test_header_format(self, tmp_path):
        path = tmp_path / "d.pgm"
        write_depth_pgm(path, np.ones((2, 3)), np.ones((2, 3), bool))
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n3 2\n65535\n")
        assert len(raw) == len(b"P5\n3 2\n65535\n") + 2 * 3 * 2


class TestWriteMetrics:
    def test_roundtrip(self, tmp_path):
        import json

        mm = MapMetrics(0.04, 0.06, 0.9, 0.8)
        path = tmp_path / "metrics.json"
        write_metrics(path, {**mm.as_dict(), "ape": 0.012})
        back = json.loads(path.read_text())
        assert back["accuracy"] == 0.04
        assert back["ape"] == 0.012
        assert list(back) == sorted(back)
