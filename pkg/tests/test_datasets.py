import numpy as np
import pytest
from PIL import Image

from deskslam import datasets as D
from deskslam import geometry as G
from deskslam.errors import BadParams, MissingIndexFile, NoAssociations


def small_intrinsics():
    return D.default_intrinsics(40, 30)


# --- analytic scene ------------------------------------------------------------


def test_sphere_sdf_hand_values():
    s = D.Primitive("sphere", np.array([1.0, 0.0, 0.0]), np.array([0.5]),
                    np.zeros(3), 1)
    assert np.isclose(s.sdf(np.array([1.0, 0.0, 0.0]))[0], -0.5)
    assert np.isclose(s.sdf(np.array([3.0, 0.0, 0.0]))[0], 1.5)
    assert np.isclose(s.sdf(np.array([1.0, 0.5, 0.0]))[0], 0.0)


def test_box_sdf_hand_values():
    b = D.Primitive("box", np.zeros(3), np.array([1.0, 2.0, 3.0]), np.zeros(3), 1)
    assert np.isclose(b.sdf(np.zeros(3))[0], -1.0)  # nearest face is x
    assert np.isclose(b.sdf(np.array([2.0, 0.0, 0.0]))[0], 1.0)
    # outside along a corner direction: euclidean distance to the corner
    p = np.array([2.0, 3.0, 4.0])
    assert np.isclose(b.sdf(p)[0], np.sqrt(3.0))


def test_plane_sdf_signed_distance():
    pl = D.Primitive("plane", np.zeros(3), np.array([0.0, 0.0, 1.0]),
                     np.zeros(3), 1)
    assert np.isclose(pl.sdf(np.array([5.0, -2.0, 1.5]))[0], 1.5)
    assert np.isclose(pl.sdf(np.array([0.0, 0.0, -0.25]))[0], -0.25)


def test_scene_sdf_min_and_ids():
    scene = D.default_scene()
    d, pid = D.scene_sdf(scene, np.array([0.55, 0.25, 0.35]))
    assert pid == 1  # center of the first sphere
    assert np.isclose(d, -0.35)


def test_scene_normals_unit_and_analytic():
    scene = D.default_scene()
    # on the sphere, the normal points radially away from its center
    c = np.array([0.55, 0.25, 0.35])
    p = c + np.array([0.35, 0.0, 0.0])
    n = D.scene_normals(scene, p[None])
    assert np.allclose(n[0], [1.0, 0.0, 0.0], atol=1e-3)
    assert np.isclose(np.linalg.norm(n[0]), 1.0, atol=1e-6)


def test_duplicate_primitive_ids_rejected():
    p = D.Primitive("sphere", np.zeros(3), np.array([1.0]), np.zeros(3), 7)
    with pytest.raises(BadParams):
        D.SyntheticScene([p, p])


def test_scene_bbox_covers_room():
    lo, hi = D.default_scene().bbox()
    assert np.allclose(lo, [-2.0, -2.0, 0.0])
    assert np.allclose(hi, [2.0, 2.0, 3.0])


# --- rendering -----------------------------------------------------------------


def test_render_depth_matches_sdf():
    scene = D.default_scene()
    K = small_intrinsics()
    pose = D.look_at_pose(np.array([1.5, 0.0, 0.9]), np.array([0.0, 0.0, 0.6]))
    fr = D.render_synthetic(scene, pose, K)
    assert fr.depth.shape == (K.height, K.width)
    valid = fr.depth > 0
    assert valid.mean() > 0.9  # the room encloses almost every ray
    # backprojected surface points must lie on the scene zero level set
    pts_cam = G.backproject_grid(K, fr.depth.astype(np.float64))[valid]
    pts_world = pts_cam @ pose.R + pose.center()
    d, _ = D.scene_sdf(scene, pts_world)
    assert np.abs(d).max() < 5e-3


def test_render_primitive_ids_consistent():
    scene = D.default_scene()
    K = small_intrinsics()
    pose = D.look_at_pose(np.array([1.5, 0.0, 0.9]), np.array([0.0, 0.0, 0.6]))
    fr = D.render_synthetic(scene, pose, K)
    valid = fr.depth > 0
    pts_cam = G.backproject_grid(K, fr.depth.astype(np.float64))[valid]
    pts_world = pts_cam @ pose.R + pose.center()
    _, ids = D.scene_sdf(scene, pts_world)
    assert (ids == fr.primitive_ids[valid]).mean() > 0.95  # edges may differ


def test_render_deterministic():
    scene = D.default_scene()
    K = small_intrinsics()
    pose = D.look_at_pose(np.array([1.2, 0.8, 1.0]), np.array([0.0, 0.0, 0.6]))
    a = D.render_synthetic(scene, pose, K)
    b = D.render_synthetic(scene, pose, K)
    assert np.array_equal(a.color, b.color)
    assert np.array_equal(a.depth, b.depth)


# --- poses / trajectories -------------------------------------------------------


def test_look_at_centers_target():
    eye = np.array([1.5, -0.7, 1.2])
    target = np.array([0.1, 0.2, 0.5])
    pose = D.look_at_pose(eye, target)
    assert np.allclose(pose.center(), eye, atol=1e-12)
    cam = pose.transform(target)
    # the target projects onto the optical axis, in front of the camera
    assert cam[2] > 0
    assert np.allclose(cam[:2], 0.0, atol=1e-12)


def test_look_at_degenerate_inputs():
    with pytest.raises(BadParams):
        D.look_at_pose(np.zeros(3), np.zeros(3))
    with pytest.raises(BadParams):
        D.look_at_pose(np.array([0.0, 0.0, 1.0]), np.zeros(3))  # parallel to up


def test_orbit_trajectory_radius_and_gaze():
    poses = D.make_trajectory("orbit", 12, {"radius": 1.5, "height": 0.9,
                                            "span_deg": 360.0})
    center = np.array([0.0, 0.0, 0.6])
    for p in poses:
        eye = p.center()
        assert np.isclose(np.linalg.norm(eye[:2] - center[:2]), 1.5)
        assert np.isclose(eye[2], 0.9 + 0.6)
    # closed orbit: consecutive angular steps are uniform, no duplicate pose
    step0 = np.linalg.norm(poses[1].center() - poses[0].center())
    stepn = np.linalg.norm(poses[0].center() - poses[-1].center())
    assert np.isclose(step0, stepn, atol=1e-9)


def test_partial_orbit_spans_endpoints():
    poses = D.make_trajectory("orbit", 5, {"radius": 1.0, "height": 0.0,
                                           "span_deg": 90.0, "center": (0, 0, 0)})
    a0 = np.arctan2(poses[0].center()[1], poses[0].center()[0])
    a1 = np.arctan2(poses[-1].center()[1], poses[-1].center()[0])
    assert np.isclose(np.degrees(a1 - a0), 90.0)


def test_trajectory_errors():
    with pytest.raises(BadParams):
        D.make_trajectory("orbit", 1, {})
    with pytest.raises(BadParams):
        D.make_trajectory("orbit", 5, {"radius": -1.0})
    with pytest.raises(BadParams):
        D.make_trajectory("spiral", 5, {})


# --- scene files ------------------------------------------------------------------


def test_scene_file_roundtrip(tmp_path):
    scene = D.default_scene()
    path = tmp_path / "scene.txt"
    D.write_scene(path, scene)
    back = D.read_scene(path)
    assert len(back.primitives) == len(scene.primitives)
    for a, b in zip(scene.primitives, back.primitives):
        assert a.kind == b.kind and a.id == b.id
        assert np.allclose(a.center, b.center)
        assert np.allclose(a.size, b.size)
        assert np.allclose(a.albedo, b.albedo)
    assert np.allclose(back.light_dir, scene.light_dir)
    assert np.isclose(back.ambient, scene.ambient)


def test_scene_file_errors(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("# nothing\n")
    with pytest.raises(BadParams):
        D.read_scene(p)
    p.write_text("not a key value line\n")
    with pytest.raises(BadParams):
        D.read_scene(p)


# --- TUM parsing -----------------------------------------------------------------


def _write_tum_dir(root, n=3, dt=0.0, with_gt=True):
    (root / "rgb").mkdir()
    (root / "depth").mkdir()
    rgb_lines, dep_lines, gt_lines = [], [], []
    rng = np.random.default_rng(0)
    for i in range(n):
        ts = 100.0 + i
        img = (rng.uniform(0, 255, (8, 10, 3))).astype(np.uint8)
        Image.fromarray(img).save(root / "rgb" / f"{i}.png")
        # depth stored as u16 at 1/5000 m per unit
        d = np.full((8, 10), 5000 * (i + 1), np.uint16)  # i+1 meters
        Image.fromarray(d).save(root / "depth" / f"{i}.png")
        rgb_lines.append(f"{ts} rgb/{i}.png")
        dep_lines.append(f"{ts + dt} depth/{i}.png")
        gt_lines.append(f"{ts} {i}.0 0 0 0 0 0 1")
    (root / "rgb.txt").write_text("# rgb\n" + "\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("# depth\n" + "\n".join(dep_lines) + "\n")
    if with_gt:
        (root / "groundtruth.txt").write_text(
            "# gt\n" + "\n".join(gt_lines) + "\n")


def test_tum_parse_association_and_scale(tmp_path):
    _write_tum_dir(tmp_path, n=3, dt=0.01)
    frames, K = D.parse_tum(tmp_path)
    assert len(frames) == 3
    assert frames[0].color.shape == (8, 10, 3)
    assert frames[0].color.max() <= 1.0
    # u16 value 5000 at default scale = exactly 1 meter
    assert np.allclose(frames[0].depth, 1.0)
    assert np.allclose(frames[2].depth, 3.0)
    assert K.width == 10 and K.height == 8


def test_tum_parse_gt_is_inverted_to_camera_from_world(tmp_path):
    _write_tum_dir(tmp_path, n=2)
    frames, _ = D.parse_tum(tmp_path)
    # groundtruth.txt stores world-from-camera; frame pose is camera-from-world,
    # so its camera center equals the stored translation
    assert np.allclose(frames[1].gt_pose.center(), [1.0, 0.0, 0.0], atol=1e-9)


def test_tum_parse_tolerance_drops_unmatched(tmp_path):
    _write_tum_dir(tmp_path, n=3, dt=0.5)  # outside the 0.02 s tolerance
    with pytest.raises(NoAssociations):
        D.parse_tum(tmp_path)


def test_tum_parse_missing_index(tmp_path):
    with pytest.raises(MissingIndexFile):
        D.parse_tum(tmp_path)


def test_associate_greedy_unique():
    pairs = D.associate([0.0, 1.0, 2.0], [0.011, 0.995, 5.0], tolerance=0.02)
    assert pairs == [(0, 0), (1, 1)]


# --- surface sampling ------------------------------------------------------------


def test_sample_scene_surface_on_zero_level_set():
    scene = D.default_scene()
    pts = D.sample_scene_surface(scene, 500, seed=1)
    assert pts.shape == (500, 3)
    d, _ = D.scene_sdf(scene, pts)
    assert np.abs(d).max() < 1e-3
