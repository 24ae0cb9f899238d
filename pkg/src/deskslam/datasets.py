"""Dataset ingestion: TUM RGB-D directories and a synthetic SDF scene oracle.

The synthetic scene doubles as ground truth for acceptance tests: frames are
sphere-traced from analytic SDF primitives, so rendered depth, per-pixel
primitive ids, and surface samples are all exactly consistent with scene_sdf.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import BadParams, MissingIndexFile, NoAssociations
from .geometry import CameraIntrinsics, Pose

TUM_DEPTH_SCALE = 1.0 / 5000.0
ASSOC_TOLERANCE = 0.02  # seconds

BACKGROUND_COLOR = np.array([0.05, 0.05, 0.08])
BACKGROUND_ID = -1


@dataclass
class RGBDFrame:
    timestamp: float
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    gt_pose: Pose | None = None
    primitive_ids: np.ndarray | None = None  # (H, W) int, synthetic only
    frame_id: int = 0


@dataclass
class Primitive:
    kind: str  # sphere | box | plane
    center: np.ndarray
    size: np.ndarray  # sphere: [radius]; box: half extents; plane: unit normal
    albedo: np.ndarray
    id: int

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        d = p - self.center
        if self.kind == "sphere":
            return np.linalg.norm(d, axis=-1) - self.size[0]
        if self.kind == "box":
            q = np.abs(d) - self.size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(np.max(q, axis=-1), 0.0)
            return outside + inside
        if self.kind == "plane":
            n = self.size / np.linalg.norm(self.size)
            return d @ n
        raise BadParams(f"unknown primitive kind {self.kind!r}")


@dataclass
class SyntheticScene:
    primitives: list
    light_dir: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.2, -0.9]))
    ambient: float = 0.25

    def __post_init__(self):
        ids = [p.id for p in self.primitives]
        if len(ids) != len(set(ids)):
            raise BadParams("primitive ids must be unique")
        self.light_dir = self.light_dir / np.linalg.norm(self.light_dir)

    def bbox(self):
        """Axis-aligned scene bounds (from plane/box/sphere extents)."""
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for p in self.primitives:
            if p.kind == "plane":
                # a plane bounds the half-space behind it
                n = p.size / np.linalg.norm(p.size)
                for ax in range(3):
                    if n[ax] > 0.9:
                        lo[ax] = min(lo[ax], p.center[ax])
                    elif n[ax] < -0.9:
                        hi[ax] = max(hi[ax], p.center[ax])
            else:
                ext = p.size[0] if p.kind == "sphere" else np.max(p.size)
                lo = np.minimum(lo, p.center - ext)
                hi = np.maximum(hi, p.center + ext)
        lo[~np.isfinite(lo)] = -2.0
        hi[~np.isfinite(hi)] = 2.0
        return lo, hi


def scene_sdf(scene: SyntheticScene, p: np.ndarray):
    """Min over primitive SDFs; returns (distance, id of the argmin)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = np.atleast_2d(p)
    dists = np.stack([prim.sdf(pts) for prim in scene.primitives], axis=-1)
    k = np.argmin(dists, axis=-1)
    d = dists[np.arange(len(pts)), k]
    ids = np.array([prim.id for prim in scene.primitives])[k]
    if single:
        return float(d[0]), int(ids[0])
    return d, ids


def scene_normals(scene: SyntheticScene, pts: np.ndarray, h: float = 5e-4) -> np.ndarray:
    """SDF gradient normals by central differences."""
    n = np.zeros_like(pts)
    for ax in range(3):
        dp = np.zeros(3)
        dp[ax] = h
        n[:, ax] = scene_sdf(scene, pts + dp)[0] - scene_sdf(scene, pts - dp)[0]
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return n / np.maximum(norm, 1e-12)


def render_synthetic(
    scene: SyntheticScene,
    pose: Pose,
    K: CameraIntrinsics,
    max_steps: int = 256,
    eps: float = 1e-4,
    t_max: float = 30.0,
    timestamp: float = 0.0,
    frame_id: int = 0,
) -> RGBDFrame:
    """Sphere-trace the scene into an RGB-D frame with per-pixel primitive ids."""
    H, W = K.height, K.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    dirs_cam = np.stack(
        [(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    R_wc = pose.R.T
    origin = pose.center()
    dirs_world = dirs_cam @ R_wc.T

    n_rays = dirs_world.shape[0]
    t = np.zeros(n_rays)
    hit = np.zeros(n_rays, dtype=bool)
    active = np.ones(n_rays, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pts = origin + t[idx, None] * dirs_world[idx]
        d, _ = scene_sdf(scene, pts)
        close = np.abs(d) < eps
        hit[idx[close]] = True
        active[idx[close]] = False
        t[idx] += d
        gone = t[idx] > t_max
        active[idx[gone]] = False

    depth = np.zeros(n_rays)
    color = np.tile(BACKGROUND_COLOR, (n_rays, 1))
    ids = np.full(n_rays, BACKGROUND_ID, dtype=np.int32)
    hidx = np.flatnonzero(hit)
    if hidx.size:
        pts = origin + t[hidx, None] * dirs_world[hidx]
        _, hit_ids = scene_sdf(scene, pts)
        ids[hidx] = hit_ids
        normals = scene_normals(scene, pts)
        lam = np.clip(-(normals @ scene.light_dir), 0.0, 1.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lam
        albedo = {p.id: p.albedo for p in scene.primitives}
        alb = np.stack([albedo[i] for i in hit_ids])
        color[hidx] = np.clip(alb * shade[:, None], 0.0, 1.0)
        depth[hidx] = t[hidx] * dirs_cam[hidx, 2]

    return RGBDFrame(
        timestamp=timestamp,
        color=color.reshape(H, W, 3).astype(np.float32),
        depth=depth.reshape(H, W).astype(np.float32),
        gt_pose=pose,
        primitive_ids=ids.reshape(H, W),
        frame_id=frame_id,
    )


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-from-world pose for a camera at eye looking at target (z-up world)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(fwd)
    if nf < 1e-12:
        raise BadParams("eye and target coincide")
    fwd = fwd / nf
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise BadParams("viewing direction parallel to up vector")
    right /= nr
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=1)
    return Pose.from_rt(R_wc.T, -R_wc.T @ eye)


def make_trajectory(kind: str, n: int, params: dict) -> list:
    """Smooth pose sequences: 'orbit' (circle) or 'lateral' (line), fixed gaze."""
    if n < 2:
        raise BadParams("need at least 2 poses")
    center = np.asarray(params.get("center", (0.0, 0.0, 0.6)), dtype=np.float64)
    poses = []
    if kind == "orbit":
        radius = float(params.get("radius", 1.6))
        height = float(params.get("height", 0.9))
        span = np.radians(float(params.get("span_deg", 360.0)))
        phase = np.radians(float(params.get("phase_deg", 0.0)))
        if radius <= 0:
            raise BadParams("orbit radius must be positive")
        closed = abs(span - 2 * np.pi) < 1e-9
        denom = n if closed else (n - 1)
        for i in range(n):
            a = phase + span * i / denom
            eye = center + np.array(
                [radius * np.cos(a), radius * np.sin(a), height]
            )
            poses.append(look_at_pose(eye, center))
    elif kind == "lateral":
        start = np.asarray(params.get("start", (-1.0, -1.5, 1.0)), dtype=np.float64)
        end = np.asarray(params.get("end", (1.0, -1.5, 1.0)), dtype=np.float64)
        for i in range(n):
            s = i / (n - 1)
            poses.append(look_at_pose(start + s * (end - start), center))
    else:
        raise BadParams(f"unknown trajectory kind {kind!r}")
    return poses


# --- default "toy room" scene ------------------------------------------------------

def default_scene(n_objects: int = 3) -> SyntheticScene:
    """A 4x4x3 m room with up to 3 distinct objects on the floor."""
    prims = [
        Primitive("plane", np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]),
                  np.array([0.55, 0.45, 0.35]), 100),  # floor
        Primitive("plane", np.array([0.0, 0.0, 3.0]), np.array([0.0, 0.0, -1.0]),
                  np.array([0.85, 0.85, 0.80]), 101),  # ceiling
        Primitive("plane", np.array([-2.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
                  np.array([0.75, 0.55, 0.50]), 102),
        Primitive("plane", np.array([2.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0]),
                  np.array([0.50, 0.70, 0.55]), 103),
        Primitive("plane", np.array([0.0, -2.0, 0.0]), np.array([0.0, 1.0, 0.0]),
                  np.array([0.55, 0.60, 0.75]), 104),
        Primitive("plane", np.array([0.0, 2.0, 0.0]), np.array([0.0, -1.0, 0.0]),
                  np.array([0.72, 0.70, 0.50]), 105),
    ]
    objects = [
        Primitive("sphere", np.array([0.55, 0.25, 0.35]), np.array([0.35]),
                  np.array([0.85, 0.20, 0.15]), 1),
        Primitive("box", np.array([-0.60, -0.30, 0.40]), np.array([0.30, 0.25, 0.40]),
                  np.array([0.15, 0.30, 0.80]), 2),
        Primitive("sphere", np.array([0.05, 0.85, 0.25]), np.array([0.25]),
                  np.array([0.20, 0.75, 0.25]), 3),
    ]
    return SyntheticScene(prims + objects[:n_objects])


def default_intrinsics(width: int = 160, height: int = 120) -> CameraIntrinsics:
    f = 110.0 * width / 160.0
    return CameraIntrinsics(f, f, width / 2.0 - 0.5, height / 2.0 - 0.5,
                            width, height)


# --- scene files --------------------------------------------------------------------

def write_scene(path, scene: SyntheticScene) -> None:
    """Serialize a scene as flat key=value lines."""
    with open(path, "w") as f:
        f.write("# deskslam synthetic scene\n")
        f.write("light_dir=%g,%g,%g\n" % tuple(scene.light_dir))
        f.write("ambient=%g\n" % scene.ambient)
        for i, p in enumerate(scene.primitives):
            f.write(f"prim.{i}.type={p.kind}\n")
            f.write(f"prim.{i}.id={p.id}\n")
            f.write("prim.%d.center=%g,%g,%g\n" % (i, *p.center))
            f.write("prim.%d.size=%s\n" % (i, ",".join("%g" % s for s in p.size)))
            f.write("prim.%d.albedo=%g,%g,%g\n" % (i, *p.albedo))


def read_scene(path) -> SyntheticScene:
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise BadParams(f"bad scene line: {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()

    def vec(s):
        return np.array([float(x) for x in s.split(",")])

    prims = []
    i = 0
    while f"prim.{i}.type" in kv:
        prims.append(
            Primitive(
                kv[f"prim.{i}.type"],
                vec(kv[f"prim.{i}.center"]),
                vec(kv[f"prim.{i}.size"]),
                vec(kv[f"prim.{i}.albedo"]),
                int(kv[f"prim.{i}.id"]),
            )
        )
        i += 1
    if not prims:
        raise BadParams("scene file contains no primitives")
    scene = SyntheticScene(prims)
    if "light_dir" in kv:
        scene.light_dir = vec(kv["light_dir"])
        scene.light_dir /= np.linalg.norm(scene.light_dir)
    if "ambient" in kv:
        scene.ambient = float(kv["ambient"])
    return scene


# --- TUM RGB-D directories ------------------------------------------------------------

def _read_index(path):
    if not os.path.exists(path):
        raise MissingIndexFile(f"missing index file {path}")
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            entries.append((float(parts[0]), parts[1] if len(parts) > 1 else None))
    return entries


def _read_groundtruth(path):
    entries = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            ts, tx, ty, tz, qx, qy, qz, qw = vals[:8]
            wc = Pose(np.array([qx, qy, qz, qw]), np.array([tx, ty, tz]))
            entries.append((ts, wc.inverse()))
    return entries


def associate(a_stamps, b_stamps, tolerance: float = ASSOC_TOLERANCE):
    """Greedy nearest-timestamp association; each b entry used at most once."""
    pairs = []
    used = set()
    for i, ta in enumerate(a_stamps):
        best, best_dt = None, tolerance
        for j, tb in enumerate(b_stamps):
            if j in used:
                continue
            dt = abs(ta - tb)
            if dt <= best_dt:
                best, best_dt = j, dt
        if best is not None:
            pairs.append((i, best))
            used.add(best)
    return pairs


def parse_tum(dirpath, depth_scale: float = TUM_DEPTH_SCALE,
              tolerance: float = ASSOC_TOLERANCE):
    """Load a TUM-layout directory into frames + intrinsics.

    rgb/depth/groundtruth entries are associated by nearest timestamp within
    the tolerance; unmatched entries are dropped.
    """
    rgb = _read_index(os.path.join(dirpath, "rgb.txt"))
    dep = _read_index(os.path.join(dirpath, "depth.txt"))
    gt_path = os.path.join(dirpath, "groundtruth.txt")
    gt = _read_groundtruth(gt_path) if os.path.exists(gt_path) else []

    pairs = associate([t for t, _ in rgb], [t for t, _ in dep], tolerance)
    if not pairs:
        raise NoAssociations("no rgb/depth pairs within tolerance")

    calib = os.path.join(dirpath, "calibration.txt")
    frames = []
    K = None
    for fid, (i, j) in enumerate(pairs):
        ts = rgb[i][0]
        img = np.asarray(
            Image.open(os.path.join(dirpath, rgb[i][1])).convert("RGB"),
            dtype=np.float32) / 255.0
        raw = np.asarray(Image.open(os.path.join(dirpath, dep[j][1])))
        depth = raw.astype(np.float32) * depth_scale
        pose = None
        if gt:
            k = int(np.argmin([abs(ts - tg) for tg, _ in gt]))
            if abs(ts - gt[k][0]) <= tolerance:
                pose = gt[k][1]
        if K is None:
            h, w = img.shape[:2]
            if os.path.exists(calib):
                fx, fy, cx, cy = [float(x) for x in open(calib).read().split()[:4]]
            else:
                # TUM freiburg default pinhole model
                fx = fy = 525.0 * w / 640.0
                cx, cy = 319.5 * w / 640.0, 239.5 * h / 480.0
            K = CameraIntrinsics(fx, fy, cx, cy, w, h, depth_scale)
        frames.append(RGBDFrame(ts, img, depth, pose, frame_id=fid))
    return frames, K


def sample_scene_surface(scene: SyntheticScene, n: int, seed: int = 0,
                         pad: float = 0.01) -> np.ndarray:
    """Uniform-ish surface samples: rejection + projection onto the zero level set."""
    rng = np.random.default_rng(seed)
    lo, hi = scene.bbox()
    out = []
    need = n
    while need > 0:
        pts = rng.uniform(lo - pad, hi + pad, size=(max(4 * need, 1024), 3))
        d, _ = scene_sdf(scene, pts)
        near = np.abs(d) < 0.2
        pts = pts[near]
        d = d[near]
        if len(pts) == 0:
            continue
        # Newton projection along the SDF gradient
        for _ in range(6):
            g = scene_normals(scene, pts)
            pts = pts - d[:, None] * g
            d, _ = scene_sdf(scene, pts)
        ok = np.abs(d) < 1e-4
        pts = pts[ok][:need]
        out.append(pts)
        need -= len(pts)
    return np.concatenate(out, axis=0)[:n]
