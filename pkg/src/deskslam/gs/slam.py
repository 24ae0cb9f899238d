"""Tracking, co-visibility keyframing, densification, and global BA for the
Gaussian-splatting backend."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import engine
from ..engine import AdamState, adam_step
from ..errors import DivergedPose, MissingTargets
from ..features import FeatureMap, upsample_to_pixels
from ..geometry import (
    CameraIntrinsics,
    Pose,
    apply_twist_torch,
    backproject_grid,
    motion_metrics,
    pose_from_twist,
)
from ..sse import SSEParams, sse_forward
from .model import GaussianMap, rasterize

DIST_THRESHOLD = 0.7   # d_l, meters
ANGLE_THRESHOLD = 15.0  # r_l, degrees
COVIS_THRESHOLD = 0.9


@dataclass
class GsConfig:
    tracking_iters: int = 30
    mapping_iters: int = 30
    first_mapping_iters: int = 300
    keyframe_every: int = 4       # periodic keyframe fallback (0 disables)
    ba_every: int = 10          # keyframes between global BA passes
    ba_iters: int = 50
    lambda_color: float = 1.0
    lambda_depth: float = 1.0
    lambda_feature: float = 1.0   # DINO-feature loss weight
    prune_opacity: float = 0.05
    seed_opacity: float = 0.5
    seed_subsample: int = 2       # take every n-th row/col of seed pixels
    seed_radius_px: float = 1.5   # seed footprint in pixels at its depth
    depth_err_factor: float = 5.0
    alpha_seed_threshold: float = 0.5
    lr_mu: float = 1e-3
    lr_log_r: float = 2e-3
    lr_logit_o: float = 0.02
    lr_logit_c: float = 0.01
    lr_fed: float = 0.02
    lr_track: float = 2e-2
    track_outlier_factor: float = 10.0  # reject |depth residual| beyond this multiple of the median (0 disables)
    lr_pose_map: float = 2e-3
    lr_pose_ba: float = 5e-4
    feature_dim: int = 16         # raw token feature width D


@dataclass
class Keyframe:
    kf_id: int
    frame_id: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    pose: Pose
    fd_px: np.ndarray    # (H, W, D) upsampled token features
    fed_px: np.ndarray   # (H, W, E) upsampled enriched features
    covisible: set = field(default_factory=set)


def keyframe_decision(current: Pose, last_kf: Pose, covis: float,
                      d_l: float = DIST_THRESHOLD,
                      r_l: float = ANGLE_THRESHOLD,
                      covis_min: float = COVIS_THRESHOLD) -> bool:
    """New keyframe when motion exceeds d_l / r_l or co-visibility drops."""
    d, r = motion_metrics(current, last_kf)
    return d > d_l or r > r_l or covis < covis_min


def gs_loss(render: dict, targets: dict, lambda_color: float = 1.0,
            lambda_depth: float = 1.0, lambda_feature: float = 1.0,
            feature_dim: int | None = None):
    """lambda_c L1(C) + lambda_d L1(D) + lambda_df L1(feature slice).

    The rendered feature image carries the full enriched channel stack; the
    raw-feature loss compares its token-feature block (channels
    [d_f : d_f + D]) against per-pixel upsampled token features.
    """
    for key in ("color", "depth"):
        if key not in targets:
            raise MissingTargets(f"missing target {key!r}")
    comps = {}
    comps["color"] = (render["color"] - targets["color"]).abs().mean()
    td = targets["depth"]
    mask = td > 0
    if "mask" in targets:
        mask = mask & targets["mask"]
    if mask.any():
        comps["depth"] = (render["depth"] - td)[mask].abs().mean()
    else:
        comps["depth"] = render["depth"].sum() * 0.0
    total = lambda_color * comps["color"] + lambda_depth * comps["depth"]
    if lambda_feature != 0 and "feat" in targets:
        if "feat" not in render:
            raise MissingTargets("feature loss requested but no feature render")
        tf = targets["feat"]
        D = tf.shape[-1]
        E = render["feat"].shape[-1]
        d_f = (E - D) // 2
        sl = render["feat"][..., d_f : d_f + D]
        if feature_dim is not None and D != feature_dim:
            raise MissingTargets("feature target width mismatch")
        if "mask" in targets:
            comps["df"] = (sl - tf)[targets["mask"]].abs().mean()
        else:
            comps["df"] = (sl - tf).abs().mean()
        total = total + lambda_feature * comps["df"]
    return total, comps


class GsSlam:
    def __init__(self, gmap: GaussianMap, K: CameraIntrinsics, sse: SSEParams,
                 cfg: GsConfig | None = None, seed: int = 0):
        self.map = gmap
        self.K = K
        self.sse = sse
        self.cfg = cfg or GsConfig()
        self.rng = np.random.default_rng(seed)
        self.keyframes: list[Keyframe] = []
        self.trajectory_entries: list = []  # (timestamp, Pose)
        self._map_adam = AdamState(lr=1.0)
        self._kf_since_ba = 0
        self.loss_history: list[float] = []

    # --- losses / targets ----------------------------------------------------

    def _targets_from(self, kf: Keyframe) -> dict:
        return {
            "color": engine.tensor(kf.color),
            "depth": engine.tensor(kf.depth),
            "feat": engine.tensor(kf.fd_px),
        }

    def _lr_scale(self) -> dict:
        c = self.cfg
        return {
            "gs.mu": c.lr_mu, "gs.log_r": c.lr_log_r, "gs.logit_o": c.lr_logit_o,
            "gs.logit_c": c.lr_logit_c, "gs.fed": c.lr_fed,
        }

    # --- tracking -------------------------------------------------------------

    def track(self, frame, init_pose: Pose, iters: int | None = None) -> Pose:
        """Pose-only optimization of color+depth residuals (features unused)."""
        cfg = self.cfg
        iters = cfg.tracking_iters if iters is None else iters
        if len(self.map) == 0:
            return init_pose
        t_color = engine.tensor(frame.color)
        t_depth = engine.tensor(frame.depth)
        twist = torch.zeros(6, requires_grad=True)
        adam = AdamState(lr=cfg.lr_track)
        best = (None, np.zeros(6))
        for it in range(iters + 1):
            R, t = apply_twist_torch(twist, init_pose)
            render = rasterize(self.map, (R, t), self.K, want_feature=False)
            # only pixels the map explains at the current pose constrain it;
            # unmapped (disoccluded) regions would otherwise pull the pose
            # away, and residual outliers inside the explained region (e.g.
            # half-covered disocclusion edges) are rejected against the median
            explained = render["alpha"].detach() > 0.5
            res_d = render["depth"] - t_depth
            dm = explained & (t_depth > 0)
            if cfg.track_outlier_factor > 0 and dm.any():
                med = res_d.detach().abs()[dm].median()
                dm = dm & (res_d.detach().abs()
                           < cfg.track_outlier_factor * med + 1e-6)
            if not dm.any():
                dm = t_depth > 0
            pix_mask = dm[..., None].to(t_color.dtype)
            l_c = ((render["color"] - t_color).abs() * pix_mask).sum() / (
                pix_mask.sum() * 3 + 1e-9)
            l_d = res_d[dm].abs().mean()
            loss = cfg.lambda_color * l_c + cfg.lambda_depth * l_d
            if not torch.isfinite(loss):
                raise DivergedPose("non-finite tracking loss")
            lv = float(loss.detach())
            if best[0] is None or lv < best[0]:
                best = (lv, twist.detach().numpy().copy())
            grads = engine.backward(loss, {"twist": twist})
            decay = 0.5 ** (3 * it // max(1, iters + 1))
            adam_step(adam, {"twist": twist}, grads, {"twist": decay})
        return pose_from_twist(best[1], init_pose)

    # --- mapping -----------------------------------------------------------------

    def densify_and_prune(self, kf: Keyframe, render: dict | None = None) -> int:
        """Seed Gaussians where the render fails to explain the frame; prune
        low-opacity survivors. Returns the number of Gaussians added."""
        cfg = self.cfg
        depth = kf.depth
        valid = depth > 0
        if render is None:
            with torch.no_grad():
                render = rasterize(self.map, kf.pose, self.K, want_feature=False)
        A = render["alpha"].detach().numpy()
        D = render["depth"].detach().numpy()
        err = np.abs(D - depth)
        med = np.median(err[valid & (A > cfg.alpha_seed_threshold)]) \
            if (valid & (A > cfg.alpha_seed_threshold)).any() else 0.0
        need = valid & ((A < cfg.alpha_seed_threshold)
                        | (err > cfg.depth_err_factor * max(med, 1e-3)))
        sub = np.zeros_like(need)
        s = cfg.seed_subsample
        off = self.rng.integers(0, s, size=2)
        sub[off[0] :: s, off[1] :: s] = True
        seeds = need & sub
        vs, us = np.nonzero(seeds)
        added = 0
        if len(us):
            pts_cam = backproject_grid(self.K, depth)[vs, us]
            R_wc = kf.pose.R.T
            pts = pts_cam @ R_wc.T + kf.pose.center()
            # footprint slightly wider than the seed grid spacing so sparse
            # seeds tile the surface without coverage gaps
            r = cfg.seed_radius_px * depth[vs, us] / self.K.fx
            added = self.map.add(
                pts, r, np.full(len(us), cfg.seed_opacity),
                kf.color[vs, us], kf.fed_px[vs, us], kf.kf_id)
            self._extend_adam_state(added)
        # prune
        o = self.map.o.detach().numpy()
        if (o < cfg.prune_opacity).any():
            self._prune_mask(o >= cfg.prune_opacity)
        return added

    def _extend_adam_state(self, n_new: int):
        if n_new == 0:
            return
        for name, p in self.map.parameters().items():
            if name in self._map_adam.m:
                pad = torch.zeros(
                    (n_new,) + tuple(p.shape[1:]), dtype=p.dtype)
                self._map_adam.m[name] = torch.cat([self._map_adam.m[name], pad])
                self._map_adam.v[name] = torch.cat([self._map_adam.v[name], pad.clone()])

    def _prune_mask(self, mask: np.ndarray):
        self.map.keep(mask)
        mt = torch.as_tensor(mask)
        for store in (self._map_adam.m, self._map_adam.v):
            for name in list(store):
                if store[name].shape[0] == len(mask):
                    store[name] = store[name][mt]

    def map_step(self, kf: Keyframe, twist: torch.Tensor | None = None,
                 twist_adam: AdamState | None = None) -> float:
        """One Adam step of the full per-frame loss on one keyframe; when a
        pose twist is supplied the keyframe pose is refined jointly."""
        cfg = self.cfg
        params = self.map.parameters()
        pose_rt = kf.pose if twist is None else apply_twist_torch(twist, kf.pose)
        render = rasterize(self.map, pose_rt, self.K,
                           want_feature=cfg.lambda_feature != 0)
        total, _ = gs_loss(render, self._targets_from(kf),
                           cfg.lambda_color, cfg.lambda_depth,
                           cfg.lambda_feature)
        if twist is None:
            grads = engine.backward(total, params)
            adam_step(self._map_adam, params, grads, self._lr_scale())
        else:
            both = dict(params)
            both["twist"] = twist
            grads = engine.backward(total, both)
            adam_step(self._map_adam, params,
                      {k: grads[k] for k in params}, self._lr_scale())
            adam_step(twist_adam, {"twist": twist}, {"twist": grads["twist"]})
        lv = float(total.detach())
        self.loss_history.append(lv)
        return lv

    def mapping_phase(self, current: Keyframe, iters: int | None = None):
        """Optimize the map over the current keyframe and its co-visible set;
        the current keyframe's pose (except the first keyframe, which fixes
        the gauge) is refined jointly."""
        iters = self.cfg.mapping_iters if iters is None else iters
        pool = [current] + [self.keyframes[i] for i in sorted(current.covisible)
                            if i < len(self.keyframes)]
        twist = None
        twist_adam = None
        if current.kf_id > 0 and self.cfg.lr_pose_map > 0:
            twist = torch.zeros(6, requires_grad=True)
            twist_adam = AdamState(lr=self.cfg.lr_pose_map)
        for it in range(iters):
            kf = current if it % 2 == 0 else pool[self.rng.integers(len(pool))]
            if kf is current and twist is not None:
                self.map_step(kf, twist, twist_adam)
            else:
                self.map_step(kf)
        if twist is not None:
            current.pose = pose_from_twist(twist.detach().numpy(), current.pose)
            self._sync_trajectory()

    # --- co-visibility ------------------------------------------------------------

    def _visible_set(self, pose: Pose) -> np.ndarray:
        with torch.no_grad():
            out = rasterize(self.map, pose, self.K, want_feature=False,
                            want_visibility=True)
        return out["visible"]

    def covisibility(self, pose_a: Pose, pose_b: Pose) -> float:
        """Fraction of Gaussians visible in A that are also visible in B."""
        if len(self.map) == 0:
            return 1.0
        va = self._visible_set(pose_a)
        if va.sum() == 0:
            return 1.0
        vb = self._visible_set(pose_b)
        return float((va & vb).sum() / va.sum())

    # --- global BA -------------------------------------------------------------------

    def global_ba(self, iters: int | None = None):
        """Joint refinement of all Gaussians and keyframe poses (first fixed)."""
        cfg = self.cfg
        iters = cfg.ba_iters if iters is None else iters
        if len(self.keyframes) < 2:
            return
        params = self.map.parameters()
        lr_scale = self._lr_scale()
        twists = {}
        for i, kf in enumerate(self.keyframes):
            if i == 0:
                continue  # gauge fixing
            tw = torch.zeros(6, requires_grad=True)
            twists[f"ba_pose.{i}"] = tw
            lr_scale[f"ba_pose.{i}"] = cfg.lr_pose_ba
        params.update(twists)
        adam = AdamState(lr=1.0)
        for _ in range(iters):
            i = int(self.rng.integers(len(self.keyframes)))
            kf = self.keyframes[i]
            key = f"ba_pose.{i}"
            if key in twists:
                pose_rt = apply_twist_torch(twists[key], kf.pose)
            else:
                pose_rt = kf.pose
            render = rasterize(self.map, pose_rt, self.K,
                               want_feature=cfg.lambda_feature != 0)
            total, _ = gs_loss(render, self._targets_from(kf),
                               cfg.lambda_color, cfg.lambda_depth,
                               cfg.lambda_feature)
            grads = engine.backward(total, params)
            adam_step(adam, params, grads, lr_scale)
        for key, tw in twists.items():
            i = int(key.split(".")[1])
            self.keyframes[i].pose = pose_from_twist(tw.detach().numpy(),
                                                     self.keyframes[i].pose)
        self._sync_trajectory()

    def _sync_trajectory(self):
        """Propagate refined keyframe poses back into the trajectory."""
        by_ts = {kf.timestamp: kf.pose for kf in self.keyframes}
        self.trajectory_entries = [
            (ts, by_ts.get(ts, pose)) for ts, pose in self.trajectory_entries
        ]

    # --- frame processing ------------------------------------------------------------

    def _make_keyframe(self, frame, features: FeatureMap, pose: Pose) -> Keyframe:
        out = sse_forward(self.sse, frame.depth, features)
        Ht, Wt = out.grid_shape
        H, W = frame.depth.shape
        fd = upsample_to_pixels(out.f_d.detach().numpy().reshape(Ht, Wt, -1), H, W)
        fed = upsample_to_pixels(out.f_ed.detach().numpy().reshape(Ht, Wt, -1), H, W)
        kf = Keyframe(
            kf_id=len(self.keyframes), frame_id=frame.frame_id,
            timestamp=frame.timestamp, color=frame.color, depth=frame.depth,
            pose=pose, fd_px=fd, fed_px=fed,
        )
        # co-visibility links against existing keyframes
        for other in self.keyframes:
            if len(self.map) and self.covisibility(pose, other.pose) > 0.3:
                kf.covisible.add(other.kf_id)
                other.covisible.add(kf.kf_id)
        return kf

    def process_frame(self, frame, features: FeatureMap,
                      initial_pose: Pose | None = None) -> Pose:
        cfg = self.cfg
        if not self.keyframes:
            pose = initial_pose or frame.gt_pose or Pose.identity()
            kf = self._make_keyframe(frame, features, pose)
            self.keyframes.append(kf)
            self.densify_and_prune(kf)
            self.mapping_phase(kf, iters=cfg.first_mapping_iters)
            self.trajectory_entries.append((frame.timestamp, pose))
            return pose
        prev = self.trajectory_entries
        init = initial_pose or constant_velocity(prev)
        pose = self.track(frame, init)
        self.trajectory_entries.append((frame.timestamp, pose))
        last_kf = self.keyframes[-1]
        covis = self.covisibility(pose, last_kf.pose)
        # motion/co-visibility thresholds, plus a periodic fallback so slow
        # smooth trajectories still refresh the map before drift accumulates
        periodic = (cfg.keyframe_every > 0
                    and frame.frame_id - last_kf.frame_id >= cfg.keyframe_every)
        if keyframe_decision(pose, last_kf.pose, covis) or periodic:
            kf = self._make_keyframe(frame, features, pose)
            self.keyframes.append(kf)
            self.densify_and_prune(kf)
            self.mapping_phase(kf)
            self._kf_since_ba += 1
            if self._kf_since_ba >= cfg.ba_every:
                self.global_ba()
                self._kf_since_ba = 0
        return pose

    def trajectory(self):
        return list(self.trajectory_entries)


def constant_velocity(stamped_poses) -> Pose:
    if len(stamped_poses) >= 2:
        p1 = stamped_poses[-1][1]
        p2 = stamped_poses[-2][1]
        return p1.compose(p2.inverse().compose(p1))
    return stamped_poses[-1][1]
