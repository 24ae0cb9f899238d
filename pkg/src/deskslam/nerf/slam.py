"""Windowed mapping and per-frame tracking for the tri-plane backend."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import engine
from ..engine import AdamState, adam_step
from ..errors import DivergedPose, EmptyWindow
from ..features import FeatureMap
from ..geometry import CameraIntrinsics, Pose, pose_from_twist
from ..sse import SSEOutput, SSEParams, sse_forward
from .model import (
    NerfMap,
    mapping_loss,
    pixel_rays_torch,
    render_rays,
    sample_rays,
)


@dataclass
class NerfConfig:
    n_strat: int = 32
    n_surf: int = 8
    pixels_per_step: int = 2048     # R
    window: int = 8                 # W
    keyframe_every: int = 4         # k
    truncation: float = 0.06
    beta_init: float = 10.0
    tracking_iters: int = 8
    mapping_iters: int = 15
    first_mapping_iters: int = 150
    tracking_pixels: int = 1024
    near: float = 0.05
    far: float = 7.0
    lr_planes: float = 0.02
    lr_decoders: float = 2e-3
    lr_beta: float = 1e-2
    lr_pose_map: float = 1e-3
    lr_track: float = 5e-2
    loss_weights: dict = field(default_factory=dict)


@dataclass
class FrameEntry:
    frame_id: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    pose: Pose
    fd_tokens: np.ndarray      # (Ht, Wt, D)
    fed_tokens: np.ndarray     # (Ht, Wt, E)
    patch_stride: int
    is_keyframe: bool = False


def sample_tokens_at_pixels(tokens: np.ndarray, us: np.ndarray, vs: np.ndarray,
                            height: int, width: int) -> np.ndarray:
    """Bilinear token-grid interpolation at scattered pixel coordinates."""
    Ht, Wt = tokens.shape[:2]
    py = np.clip((vs + 0.5) * Ht / height - 0.5, 0, Ht - 1)
    px = np.clip((us + 0.5) * Wt / width - 0.5, 0, Wt - 1)
    y0 = np.clip(np.floor(py).astype(int), 0, max(Ht - 2, 0))
    x0 = np.clip(np.floor(px).astype(int), 0, max(Wt - 2, 0))
    y1 = np.minimum(y0 + 1, Ht - 1)
    x1 = np.minimum(x0 + 1, Wt - 1)
    wy = (py - y0)[:, None]
    wx = (px - x0)[:, None]
    top = tokens[y0, x0] * (1 - wx) + tokens[y0, x1] * wx
    bot = tokens[y1, x0] * (1 - wx) + tokens[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def constant_velocity_init(prev: Pose, prev2: Pose | None) -> Pose:
    """p_{t-1} * (p_{t-2}^{-1} * p_{t-1}) extrapolation."""
    if prev2 is None:
        return prev
    return prev.compose(prev2.inverse().compose(prev))


class NerfSlam:
    def __init__(self, nerf: NerfMap, K: CameraIntrinsics, sse: SSEParams,
                 cfg: NerfConfig | None = None, seed: int = 0):
        self.map = nerf
        self.K = K
        self.sse = sse
        self.cfg = cfg or NerfConfig()
        self.rng = np.random.default_rng(seed)
        self.frames: list[FrameEntry] = []
        self.keyframes: list[int] = []
        self._map_adam = AdamState(lr=1.0)  # per-param scaling carries the lr
        self.loss_history: list[float] = []

    # --- frame ingestion -------------------------------------------------

    def encode_frame(self, frame, features: FeatureMap) -> SSEOutput:
        return sse_forward(self.sse, frame.depth, features)

    def add_frame(self, frame, features: FeatureMap, pose: Pose) -> FrameEntry:
        out = self.encode_frame(frame, features)
        Ht, Wt = out.grid_shape
        entry = FrameEntry(
            frame_id=frame.frame_id,
            timestamp=frame.timestamp,
            color=frame.color,
            depth=frame.depth,
            pose=pose,
            fd_tokens=out.f_d.detach().numpy().reshape(Ht, Wt, -1),
            fed_tokens=out.f_ed.detach().numpy().reshape(Ht, Wt, -1),
            patch_stride=features.patch_stride,
        )
        self.frames.append(entry)
        if (frame.frame_id % self.cfg.keyframe_every) == 0:
            entry.is_keyframe = True
            self.keyframes.append(len(self.frames) - 1)
        return entry

    def process_frame(self, frame, features: FeatureMap,
                      initial_pose: Pose | None = None) -> Pose:
        """Track (after the first frame), ingest, and run the mapping window."""
        if not self.frames:
            pose = initial_pose or frame.gt_pose or Pose.identity()
            self.add_frame(frame, features, pose)
            self.map_window(iters=self.cfg.first_mapping_iters)
            return pose
        init = initial_pose or constant_velocity_init(
            self.frames[-1].pose,
            self.frames[-2].pose if len(self.frames) > 1 else None,
        )
        pose = self.track_step(frame, init, iters=self.cfg.tracking_iters)
        self.add_frame(frame, features, pose)
        self.map_window(iters=self.cfg.mapping_iters)
        return pose

    # --- tracking ----------------------------------------------------------

    def _frame_pixel_batch(self, color, depth, n, valid_only=True):
        H, W = depth.shape
        if valid_only:
            vs, us = np.nonzero(depth > 0)
            if len(us) == 0:
                vs, us = np.mgrid[0:H, 0:W].reshape(2, -1)
        else:
            vs, us = np.mgrid[0:H, 0:W].reshape(2, -1)
        sel = self.rng.choice(len(us), size=min(n, len(us)), replace=False)
        return us[sel].astype(np.float32), vs[sel].astype(np.float32)

    def track_step(self, frame, init_pose: Pose, iters: int | None = None) -> Pose:
        """Minimize color+depth residuals over the pose twist, map frozen."""
        cfg = self.cfg
        iters = cfg.tracking_iters if iters is None else iters
        us, vs = self._frame_pixel_batch(frame.color, frame.depth,
                                         cfg.tracking_pixels)
        vi = vs.astype(int)
        ui = us.astype(int)
        t_color = engine.tensor(frame.color[vi, ui])
        t_depth_np = frame.depth[vi, ui]
        t_depth = engine.tensor(t_depth_np)
        z = engine.tensor(sample_rays(t_depth_np, cfg.near, cfg.far,
                                      cfg.n_strat, cfg.n_surf,
                                      cfg.truncation, self.rng))
        ust = engine.tensor(us)
        vst = engine.tensor(vs)

        twist = torch.zeros(6, requires_grad=True)
        adam = AdamState(lr=cfg.lr_track)
        best_twist = np.zeros(6)
        best_loss = None
        valid = t_depth > 0
        keep = None
        for it in range(iters + 1):
            from ..geometry import apply_twist_torch

            R, t = apply_twist_torch(twist, init_pose)
            origins, dirs = pixel_rays_torch(self.K, R, t, ust, vst)
            out = render_rays(self.map, origins, dirs, z, want_feat=False)
            res_d = out["depth"] - t_depth
            if keep is None:
                # freeze the inlier set at the initial pose so per-iteration
                # losses stay comparable: rays the map can explain (rendered
                # opacity) minus depth-residual outliers (unmapped regions)
                opaque = out["weights"].detach().sum(dim=-1) > 0.5
                keep = valid & opaque
                if keep.any():
                    med = res_d[keep].detach().abs().median()
                    keep = keep & (res_d.detach().abs() < 10.0 * med + 1e-6)
                if not keep.any():
                    keep = valid if valid.any() else torch.ones_like(valid)
            l_c = ((out["color"] - t_color)[keep] ** 2).mean()
            l_d = (res_d[keep] ** 2).mean()
            loss = l_c + 0.1 * l_d
            if not torch.isfinite(loss):
                raise DivergedPose("non-finite tracking loss")
            lv = float(loss.detach())
            if best_loss is None or lv < best_loss:
                best_loss = lv
                best_twist = twist.detach().numpy().copy()
            grads = engine.backward(loss, {"twist": twist})
            # coarse-to-fine step size: halve the lr each third of the budget
            decay = 0.5 ** (3 * it // max(1, iters + 1))
            adam_step(adam, {"twist": twist}, grads, {"twist": decay})
        return pose_from_twist(best_twist, init_pose)

    # --- mapping ---------------------------------------------------------------

    def _window_indices(self) -> list[int]:
        n = len(self.frames)
        if n == 0:
            raise EmptyWindow("no frames to map")
        recent = list(range(max(0, n - 3), n))  # current + 2 most recent
        pool = [i for i in self.keyframes if i not in recent]
        extra = min(self.cfg.window - len(recent), len(pool))
        if extra > 0:
            chosen = self.rng.choice(len(pool), size=extra, replace=False)
            recent += [pool[i] for i in chosen]
        return sorted(recent)

    def map_window(self, iters: int = 1) -> float:
        """Joint optimization of the map and the window poses."""
        cfg = self.cfg
        window = self._window_indices()
        params = self.map.parameters()
        lr_scale = {}
        for name in params:
            if name.startswith("tri."):
                lr_scale[name] = cfg.lr_planes
            elif name == "log_beta":
                lr_scale[name] = cfg.lr_beta
            else:
                lr_scale[name] = cfg.lr_decoders
        twists = {}
        for i in window:
            if self.frames[i].frame_id == 0:
                continue  # gauge anchor
            tw = torch.zeros(6, requires_grad=True)
            twists[f"pose.{i}"] = tw
            lr_scale[f"pose.{i}"] = cfg.lr_pose_map
        params.update(twists)
        pose_adam_offset = self._map_adam.step_count

        last = 0.0
        for _ in range(iters):
            loss = self._window_loss(window, twists)
            grads = engine.backward(loss, params)
            # pose moments are per-phase; reuse the shared state but keep
            # freshly created twists consistent by zero-initialized moments
            adam_step(self._map_adam, params, grads, lr_scale)
            last = float(loss.detach())
            self.loss_history.append(last)
        del pose_adam_offset
        for key, tw in twists.items():
            i = int(key.split(".")[1])
            self.frames[i].pose = pose_from_twist(tw.detach().numpy(),
                                                  self.frames[i].pose)
            # twist params die here; drop their optimizer moments
            self._map_adam.m.pop(key, None)
            self._map_adam.v.pop(key, None)
        return last

    def _window_loss(self, window: list[int], twists: dict) -> torch.Tensor:
        from ..geometry import apply_twist_torch

        cfg = self.cfg
        per = max(16, cfg.pixels_per_step // len(window))
        H, W = self.K.height, self.K.width
        origins, dirs, zs = [], [], []
        colors, depths, fds, feds = [], [], [], []
        for i in window:
            e = self.frames[i]
            us, vs = self._frame_pixel_batch(e.color, e.depth, per,
                                             valid_only=False)
            vi, ui = vs.astype(int), us.astype(int)
            key = f"pose.{i}"
            if key in twists:
                R, t = apply_twist_torch(twists[key], e.pose)
            else:
                R = engine.tensor(e.pose.R)
                t = engine.tensor(e.pose.t)
            o, d = pixel_rays_torch(self.K, R, t, engine.tensor(us),
                                    engine.tensor(vs))
            dep = e.depth[vi, ui]
            zs.append(sample_rays(dep, cfg.near, cfg.far, cfg.n_strat,
                                  cfg.n_surf, cfg.truncation, self.rng))
            origins.append(o)
            dirs.append(d)
            colors.append(e.color[vi, ui])
            depths.append(dep)
            fds.append(sample_tokens_at_pixels(e.fd_tokens, us, vs, H, W))
            feds.append(sample_tokens_at_pixels(e.fed_tokens, us, vs, H, W))
        out = render_rays(
            self.map,
            torch.cat(origins), torch.cat(dirs),
            engine.tensor(np.concatenate(zs)),
            want_feat=True, want_plane_feat=True,
        )
        targets = {
            "color": engine.tensor(np.concatenate(colors)),
            "depth": engine.tensor(np.concatenate(depths)),
            "feat": engine.tensor(np.concatenate(fds)),
            "edino": engine.tensor(np.concatenate(feds)),
        }
        total, _ = mapping_loss(self.map, out, targets, cfg.loss_weights)
        return total

    # --- outputs -------------------------------------------------------------

    def trajectory(self):
        return [(e.timestamp, e.pose) for e in self.frames]
