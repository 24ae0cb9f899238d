"""Trajectory, rendering, and reconstruction metrics plus mesh extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptyInput, EmptyMap, ShapeMismatch, TooFewPairs
from .geometry import CameraIntrinsics, Pose

PSNR_CAP_DB = 99.0
COMPLETION_THRESHOLD_M = 0.05
ASSOC_TOLERANCE = 0.02


@dataclass
class Mesh:
    vertices: np.ndarray   # (V, 3) meters
    triangles: np.ndarray  # (T, 3) int


def associate_trajectories(est, gt, tolerance: float = ASSOC_TOLERANCE):
    """Pair (timestamp, Pose) lists by nearest timestamp within tolerance."""
    pairs = []
    used = set()
    gt_ts = np.array([t for t, _ in gt])
    for ts, pose in est:
        j = int(np.argmin(np.abs(gt_ts - ts)))
        if abs(gt_ts[j] - ts) <= tolerance and j not in used:
            pairs.append((pose, gt[j][1]))
            used.add(j)
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray):
    """Closed-form least-squares rigid alignment (no scale): R @ src + t ~= dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(est, gt, tolerance: float = ASSOC_TOLERANCE) -> float:
    """ATE RMSE in cm after rigid alignment of the camera-center trajectories."""
    pairs = associate_trajectories(est, gt, tolerance)
    if len(pairs) < 3:
        raise TooFewPairs(f"need >= 3 associated pose pairs, got {len(pairs)}")
    c_est = np.stack([p.center() for p, _ in pairs])
    c_gt = np.stack([q.center() for _, q in pairs])
    R, t = align_rigid(c_est, c_gt)
    resid = c_est @ R.T + t - c_gt
    return float(np.sqrt((resid**2).sum(axis=1).mean()) * 100.0)


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB with unit peak; identical images cap."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 10 ** (-cap_db / 10.0):
        return cap_db
    return 10.0 * np.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, k1: float = 0.01, k2: float = 0.03,
         sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window and unit dynamic range."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., i], b[..., i], k1, k2, sigma)
                              for i in range(a.shape[2])]))
    c1 = k1**2
    c2 = k2**2
    blur = dict(sigma=sigma, truncate=5.0 / sigma, mode="reflect")  # 11x11 kernel
    mu_a = gaussian_filter(a, **blur)
    mu_b = gaussian_filter(b, **blur)
    var_a = gaussian_filter(a * a, **blur) - mu_a**2
    var_b = gaussian_filter(b * b, **blur) - mu_b**2
    cov = gaussian_filter(a * b, **blur) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def depth_l1(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute depth difference over the valid mask, in cm."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if mask is None:
        mask = (a > 0) & (b > 0)
    if not mask.any():
        raise EmptyInput("empty valid mask")
    return float(np.abs(a[mask] - b[mask]).mean() * 100.0)


def extract_mesh(sdf_fn, bbox_lo, bbox_hi, voxel: float) -> Mesh:
    """Marching cubes of a scalar SDF callable over a regular grid."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    lo = np.asarray(bbox_lo, float)
    hi = np.asarray(bbox_hi, float)
    ns = np.maximum(np.ceil((hi - lo) / voxel).astype(int) + 1, 2)
    xs = [lo[i] + voxel * np.arange(ns[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*xs, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.asarray(sdf_fn(grid.astype(np.float32))).reshape(ns)
    if not (vals.min() < 0 < vals.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    verts, faces, _, _ = measure.marching_cubes(vals, level=0.0, spacing=(voxel,) * 3)
    if len(verts) == 0:
        raise EmptyMap("no isosurface found")
    return Mesh(verts + lo, faces.astype(int))


def sample_mesh_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples."""
    if len(mesh.triangles) == 0:
        raise EmptyInput("mesh has no triangles")
    v = mesh.vertices
    tri = v[mesh.triangles]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(tri), size=n, p=areas / areas.sum())
    u = rng.random((n, 1))
    w = rng.random((n, 1))
    flip = (u + w) > 1
    u[flip] = 1 - u[flip]
    w[flip] = 1 - w[flip]
    t = tri[idx]
    return t[:, 0] + u * (t[:, 1] - t[:, 0]) + w * (t[:, 2] - t[:, 0])


def mesh_metrics(pred: Mesh, gt_points: np.ndarray, n_samples: int = 10_000,
                 threshold: float = COMPLETION_THRESHOLD_M, seed: int = 0):
    """(accuracy cm, completion cm, completion rate %) via nearest neighbors."""
    if len(gt_points) == 0:
        raise EmptyInput("no ground-truth points")
    pred_pts = sample_mesh_surface(pred, n_samples, seed)
    acc = cKDTree(gt_points).query(pred_pts)[0].mean()
    d_gt = cKDTree(pred_pts).query(gt_points)[0]
    comp = d_gt.mean()
    rate = float((d_gt < threshold).mean() * 100.0)
    return float(acc * 100.0), float(comp * 100.0), rate


# --- frustum culling -----------------------------------------------------------------

def observed_mask(points: np.ndarray, poses, K: CameraIntrinsics,
                  depth_maps=None, depth_tol: float = 0.05) -> np.ndarray:
    """True for points seen by at least one camera; with depth maps supplied,
    a point must also not be occluded (projected depth near the rendered one)."""
    seen = np.zeros(len(points), dtype=bool)
    for i, pose in enumerate(poses):
        rem = ~seen
        if not rem.any():
            break
        p = points[rem] @ pose.R.T + pose.t
        z = p[:, 2]
        ok = z > 1e-3
        u = np.where(ok, K.fx * p[:, 0] / np.where(ok, z, 1.0) + K.cx, -1)
        v = np.where(ok, K.fy * p[:, 1] / np.where(ok, z, 1.0) + K.cy, -1)
        ok &= (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        if depth_maps is not None:
            ui = np.clip(u.astype(int), 0, K.width - 1)
            vi = np.clip(v.astype(int), 0, K.height - 1)
            dm = depth_maps[i][vi, ui]
            ok &= (dm > 0) & (np.abs(z - dm) < depth_tol)
        idx = np.flatnonzero(rem)
        seen[idx[ok]] = True
    return seen


def cull_mesh(mesh: Mesh, poses, K: CameraIntrinsics,
              depth_maps=None, depth_tol: float = 0.10) -> Mesh:
    """Drop triangles never observed by any training frustum."""
    if len(mesh.triangles) == 0:
        return mesh
    centroids = mesh.vertices[mesh.triangles].mean(axis=1)
    keep = observed_mask(centroids, poses, K, depth_maps, depth_tol)
    tris = mesh.triangles[keep]
    used = np.unique(tris)
    remap = -np.ones(len(mesh.vertices), dtype=int)
    remap[used] = np.arange(len(used))
    return Mesh(mesh.vertices[used], remap[tris])


# --- report ------------------------------------------------------------------------------

def write_metrics_json(path, metrics: dict) -> None:
    """metrics.json with only the applicable fields present."""
    clean = {k: (float(v) if v is not None else None)
             for k, v in metrics.items() if v is not None}
    with open(path, "w") as f:
        json.dump(clean, f, indent=2, sort_keys=True)
        f.write("\n")


def mesh_to_ply(path, mesh: Mesh) -> None:
    with open(path, "wb") as f:
        head = [
            "ply", "format binary_little_endian 1.0",
            f"element vertex {len(mesh.vertices)}",
            "property float x", "property float y", "property float z",
            f"element face {len(mesh.triangles)}",
            "property list uchar int vertex_indices", "end_header",
        ]
        f.write(("\n".join(head) + "\n").encode())
        f.write(mesh.vertices.astype("<f4").tobytes())
        tris = mesh.triangles.astype("<i4")
        counts = np.full((len(tris), 1), 3, dtype=np.uint8)
        rows = b"".join(
            counts[i].tobytes() + tris[i].tobytes() for i in range(len(tris)))
        f.write(rows)
