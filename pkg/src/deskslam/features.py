"""Per-frame dense feature grids: file import, synthetic stand-ins, upsampling.

Real ViT features are consumed from precomputed "DNF1" files. For
self-contained runs, synthetic features encode object identity plus coarse
geometry, mimicking the object-coherence property of self-supervised ViT
features: tokens on the same object are near-identical, tokens on different
objects are nearly orthogonal.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .datasets import RGBDFrame, SyntheticScene, scene_normals
from .errors import (
    BadMagic,
    MissingPrimitiveIds,
    NonFiniteValues,
    TruncatedPayload,
)
from .geometry import CameraIntrinsics, backproject_grid

FEATURE_MAGIC = b"DNF1"
DEFAULT_PATCH_STRIDE = 8
DEFAULT_REAL_DIM = 384
DEFAULT_SYNTH_DIM = 16


@dataclass(frozen=True)
class FeatureMap:
    tokens: np.ndarray  # (H_t, W_t, D) float32
    patch_stride: int
    frame_id: int = 0

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    @property
    def grid_shape(self):
        return self.tokens.shape[:2]


def token_grid_shape(height: int, width: int, patch_stride: int):
    return (
        int(np.ceil(height / patch_stride)),
        int(np.ceil(width / patch_stride)),
    )


def save_features(path, fm: FeatureMap) -> None:
    h, w, d = fm.tokens.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", h, w, d))
        f.write(np.ascontiguousarray(fm.tokens, dtype="<f4").tobytes())


def load_features(path, patch_stride: int = DEFAULT_PATCH_STRIDE,
                  frame_id: int = 0) -> FeatureMap:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FEATURE_MAGIC:
        raise BadMagic(f"expected {FEATURE_MAGIC!r}, got {data[:4]!r}")
    h, w, d = struct.unpack_from("<III", data, 4)
    expected = h * w * d * 4
    payload = data[16:]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"expected {expected} payload bytes, got {len(payload)}"
        )
    tokens = np.frombuffer(payload, dtype="<f4", count=h * w * d).reshape(h, w, d)
    if not np.isfinite(tokens).all():
        raise NonFiniteValues(f"non-finite values in {path}")
    return FeatureMap(tokens.astype(np.float32), patch_stride, frame_id)


def feature_file_name(frame_id: int) -> str:
    return "%06d.dnf" % frame_id


def load_feature_dir(dirpath, frame_id: int,
                     patch_stride: int = DEFAULT_PATCH_STRIDE) -> FeatureMap:
    return load_features(
        os.path.join(dirpath, feature_file_name(frame_id)), patch_stride, frame_id
    )


def _id_embedding(rng_seed: int, obj_id: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng((rng_seed, obj_id + 2**20))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def synth_features(
    frame: RGBDFrame,
    scene: SyntheticScene,
    K: CameraIntrinsics,
    seed: int = 0,
    dim: int = DEFAULT_SYNTH_DIM,
    patch_stride: int = DEFAULT_PATCH_STRIDE,
) -> FeatureMap:
    """Deterministic per-token features keyed by majority object id per patch.

    Each token is the seeded unit embedding of the patch's majority primitive
    id plus a small perturbation from the mean surface normal, then
    renormalized. Same object => cosine similarity > 0.95 between tokens;
    different objects => near-orthogonal embeddings.
    """
    if frame.primitive_ids is None:
        raise MissingPrimitiveIds("synthetic features need per-pixel primitive ids")
    H, W = frame.depth.shape
    Ht, Wt = token_grid_shape(H, W, patch_stride)

    # per-pixel normals in camera frame, from the analytic scene
    pts_cam = backproject_grid(K, frame.depth.astype(np.float64))
    valid = frame.depth > 0
    normals_px = np.zeros((H, W, 3))
    if frame.gt_pose is not None and valid.any():
        R_wc = frame.gt_pose.R.T
        pts_world = pts_cam[valid] @ R_wc.T + frame.gt_pose.center()
        n_world = scene_normals(scene, pts_world)
        normals_px[valid] = n_world @ R_wc  # rotate back to camera frame

    proj = np.random.default_rng((seed, 2**21)).standard_normal((dim, 3))
    proj /= np.linalg.norm(proj, axis=0, keepdims=True)

    tokens = np.zeros((Ht, Wt, dim), dtype=np.float64)
    ids = frame.primitive_ids
    for r in range(Ht):
        for c in range(Wt):
            patch_ids = ids[
                r * patch_stride : (r + 1) * patch_stride,
                c * patch_stride : (c + 1) * patch_stride,
            ].ravel()
            uniq, counts = np.unique(patch_ids, return_counts=True)
            major = int(uniq[np.argmax(counts)])
            emb = _id_embedding(seed, major, dim)
            patch_n = normals_px[
                r * patch_stride : (r + 1) * patch_stride,
                c * patch_stride : (c + 1) * patch_stride,
            ].reshape(-1, 3)
            mean_n = patch_n.mean(axis=0)
            tok = emb + 0.06 * (proj @ mean_n)
            tokens[r, c] = tok / np.linalg.norm(tok)
    return FeatureMap(tokens.astype(np.float32), patch_stride, frame.frame_id)


def upsample_to_pixels(fm_tokens: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinearly interpolate a token grid (Ht, Wt, D) to per-pixel (H, W, D).

    Token (r, c) is anchored at the center of its patch footprint; pixel
    queries outside the outermost token centers clamp (edge padding).
    """
    if isinstance(fm_tokens, FeatureMap):
        fm_tokens = fm_tokens.tokens
    if height <= 0 or width <= 0:
        raise ValueError("target size must be positive")
    Ht, Wt, D = fm_tokens.shape
    sy = height / Ht
    sx = width / Wt
    py = (np.arange(height) + 0.5) / sy - 0.5
    px = (np.arange(width) + 0.5) / sx - 0.5
    py = np.clip(py, 0, Ht - 1)
    px = np.clip(px, 0, Wt - 1)
    y0 = np.clip(np.floor(py).astype(int), 0, max(Ht - 2, 0))
    x0 = np.clip(np.floor(px).astype(int), 0, max(Wt - 2, 0))
    y1 = np.minimum(y0 + 1, Ht - 1)
    x1 = np.minimum(x0 + 1, Wt - 1)
    wy = (py - y0)[:, None, None]
    wx = (px - x0)[None, :, None]
    top = fm_tokens[y0][:, x0] * (1 - wx) + fm_tokens[y0][:, x1] * wx
    bot = fm_tokens[y1][:, x0] * (1 - wx) + fm_tokens[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def depth_token_stats(depth: np.ndarray, patch_stride: int) -> np.ndarray:
    """Per-patch depth statistics: mean, x-gradient, y-gradient, valid fraction.

    These are the geometry tokens consumed alongside the feature tokens; the
    layout matches the token grid one-to-one.
    """
    H, W = depth.shape
    Ht, Wt = token_grid_shape(H, W, patch_stride)
    stats = np.zeros((Ht, Wt, 4), dtype=np.float64)
    gy, gx = np.gradient(depth.astype(np.float64))
    valid = depth > 0
    for r in range(Ht):
        for c in range(Wt):
            sl = (
                slice(r * patch_stride, (r + 1) * patch_stride),
                slice(c * patch_stride, (c + 1) * patch_stride),
            )
            m = valid[sl]
            frac = m.mean()
            if m.any():
                stats[r, c, 0] = depth[sl][m].mean()
                stats[r, c, 1] = gx[sl][m].mean()
                stats[r, c, 2] = gy[sl][m].mean()
            stats[r, c, 3] = frac
    return stats.astype(np.float32)
