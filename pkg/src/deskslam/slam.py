"""End-to-end run orchestration shared by the CLI and the acceptance tests."""

from __future__ import annotations

import os

import numpy as np
import torch

from . import engine, report
from .config import RunConfig
from .datasets import (
    RGBDFrame,
    default_intrinsics,
    default_scene,
    make_trajectory,
    parse_tum,
    read_scene,
    render_synthetic,
    sample_scene_surface,
    scene_sdf,
)
from .errors import ConfigError
from .evaluation import (
    ate_rmse,
    cull_mesh,
    depth_l1,
    extract_mesh,
    mesh_metrics,
    mesh_to_ply,
    observed_mask,
    psnr,
    ssim,
    write_metrics_json,
)
from .features import load_feature_dir, synth_features
from .geometry import CameraIntrinsics, write_tum_trajectory
from .gs import GsConfig, GsSlam
from .gs.model import GaussianMap, rasterize, save_ply
from .nerf import NerfMap, NerfSlam
from .nerf.model import render_image
from .nerf.slam import NerfConfig
from .sse import SSEParams


def nerf_config_from(cfg: RunConfig) -> NerfConfig:
    return NerfConfig(
        n_strat=cfg["nerf.n_strat"], n_surf=cfg["nerf.n_surf"],
        pixels_per_step=cfg["nerf.pixels_per_step"], window=cfg["nerf.window"],
        keyframe_every=cfg["nerf.keyframe_every"],
        truncation=cfg["nerf.truncation"], beta_init=cfg["nerf.beta_init"],
        tracking_iters=cfg["nerf.tracking_iters"],
        mapping_iters=cfg["nerf.mapping_iters"],
        first_mapping_iters=cfg["nerf.first_mapping_iters"],
        tracking_pixels=cfg["nerf.tracking_pixels"],
        lr_planes=cfg["nerf.lr_planes"], lr_decoders=cfg["nerf.lr_decoders"],
        lr_track=cfg["nerf.lr_track"], lr_pose_map=cfg["nerf.lr_pose_map"],
        loss_weights={
            "color": cfg["nerf.lambda_color"], "depth": cfg["nerf.lambda_depth"],
            "ef": cfg["nerf.lambda_ef"], "df": cfg["nerf.lambda_df"],
            "fs": cfg["nerf.lambda_fs"], "sdf_near": cfg["nerf.lambda_sdf"],
            "sdf_far": cfg["nerf.lambda_tr"],
        },
    )


def gs_config_from(cfg: RunConfig) -> GsConfig:
    return GsConfig(
        tracking_iters=cfg["gs.tracking_iters"],
        mapping_iters=cfg["gs.mapping_iters"],
        first_mapping_iters=cfg["gs.first_mapping_iters"],
        keyframe_every=cfg["gs.keyframe_every"],
        ba_every=cfg["gs.ba_every"], ba_iters=cfg["gs.ba_iters"],
        lambda_color=cfg["gs.lambda_color"], lambda_depth=cfg["gs.lambda_depth"],
        lambda_feature=cfg["gs.lambda_df"],
        prune_opacity=cfg["gs.prune_opacity"],
        seed_subsample=cfg["gs.seed_subsample"],
        seed_radius_px=cfg["gs.seed_radius_px"],
        lr_track=cfg["gs.lr_track"],
        lr_pose_map=cfg["gs.lr_pose_map"],
        feature_dim=cfg["features.dim"],
    )


def load_dataset(cfg: RunConfig):
    """Returns (frames, K, scene-or-None, gt_trajectory-or-None)."""
    spec = cfg["dataset"]
    n = cfg["frames"]
    if spec.startswith("synthetic"):
        _, _, scene_arg = spec.partition(":")
        scene = default_scene() if scene_arg in ("", "builtin") \
            else read_scene(scene_arg)
        K = default_intrinsics(cfg["image.width"], cfg["image.height"])
        poses = make_trajectory(
            cfg["trajectory.kind"], n,
            {
                "radius": cfg["trajectory.radius"],
                "height": cfg["trajectory.height"],
                "span_deg": cfg["trajectory.span_deg"],
                "center": cfg.vec3("trajectory.center"),
            },
        )
        frames = [
            render_synthetic(scene, pose, K, timestamp=i / 30.0, frame_id=i)
            for i, pose in enumerate(poses)
        ]
        gt = [(f.timestamp, f.gt_pose) for f in frames]
        return frames, K, scene, gt
    if spec.startswith("tum:"):
        frames, K = parse_tum(spec[4:])
        frames = frames[:n]
        gt = [(f.timestamp, f.gt_pose) for f in frames if f.gt_pose is not None]
        return frames, K, None, (gt if gt else None)
    raise ConfigError(f"unknown dataset spec {spec!r}")


def make_feature_provider(cfg: RunConfig, scene, K: CameraIntrinsics):
    spec = cfg["features"]
    stride = cfg["features.patch_stride"]
    dim = cfg["features.dim"]
    seed = cfg["seed"]
    if spec == "synthetic":
        if scene is None:
            raise ConfigError("synthetic features need a synthetic dataset")
        return lambda frame: synth_features(frame, scene, K, seed, dim, stride)
    if spec.startswith("files:"):
        dirpath = spec[6:]
        return lambda frame: load_feature_dir(dirpath, frame.frame_id, stride)
    raise ConfigError(f"unknown feature source {spec!r}")


def build_runner(cfg: RunConfig, K: CameraIntrinsics, scene):
    dim = cfg["features.dim"]
    sse = SSEParams.init(dim, cfg["sse.width"], cfg["seed"],
                         trainable=cfg["sse.trainable"])
    backend = cfg["backend"]
    if backend == "gs":
        return GsSlam(GaussianMap(sse.edino_dim), K, sse,
                      gs_config_from(cfg), seed=cfg["seed"])
    if backend == "nerf":
        if scene is not None:
            lo, hi = scene.bbox()
        else:
            lo, hi = np.array([-4.0, -4.0, -4.0]), np.array([4.0, 4.0, 4.0])
        pad = 0.10
        lo, hi = lo - pad, hi + pad
        scale = float(np.max(hi - lo)) / 8.0
        nerf = NerfMap.create(
            lo, hi, feature_dim=dim, edino_dim=sse.edino_dim,
            geo_cells=(cfg["nerf.geo_coarse_cm"] / 100.0 * scale,
                       cfg["nerf.geo_fine_cm"] / 100.0 * scale),
            app_cells=(cfg["nerf.app_coarse_cm"] / 100.0 * scale,
                       cfg["nerf.app_fine_cm"] / 100.0 * scale),
            truncation=cfg["nerf.truncation"], beta_init=cfg["nerf.beta_init"],
            seed=cfg["seed"],
        )
        ncfg = nerf_config_from(cfg)
        ncfg.far = float(np.linalg.norm(hi - lo))
        return NerfSlam(nerf, K, sse, ncfg, seed=cfg["seed"])
    raise ConfigError(f"unknown backend {cfg['backend']!r}")


def render_view(runner, pose, K: CameraIntrinsics):
    """Backend-agnostic full-frame render at a pose."""
    if isinstance(runner, GsSlam):
        with torch.no_grad():
            out = rasterize(runner.map, pose, K, want_feature=False)
        return {"color": out["color"].numpy(), "depth": out["depth"].numpy()}
    ncfg = runner.cfg
    return render_image(runner.map, pose, K, ncfg.near, ncfg.far)


def run(cfg: RunConfig, progress=None) -> dict:
    """Execute a full SLAM run and write all artifacts into cfg['out']."""
    if cfg["deterministic"]:
        engine.set_deterministic(cfg["seed"])
    outdir = cfg["out"]
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.txt"), "w") as f:
        f.write(cfg.dump())

    frames, K, scene, gt = load_dataset(cfg)
    provider = make_feature_provider(cfg, scene, K)
    runner = build_runner(cfg, K, scene)

    for frame in frames:
        runner.process_frame(frame, provider(frame))
        if progress:
            progress(frame.frame_id, len(frames))

    traj = runner.trajectory()
    write_tum_trajectory(os.path.join(outdir, "trajectory.txt"), traj)

    metrics = {}
    if gt is not None and len(gt) >= 3:
        metrics["ate_rmse_cm"] = ate_rmse(traj, gt)

    # training-view rendering quality: the splatting backend optimizes the
    # map only on keyframes, so those are its training views; the implicit
    # backend trains on every frame, so sample the trajectory uniformly
    if isinstance(runner, GsSlam):
        views = [(kf.frame_id, kf.color, kf.depth, kf.pose)
                 for kf in runner.keyframes]
    else:
        every = max(1, cfg["eval.render_every"])
        views = [(i, frames[i].color, frames[i].depth, traj[i][1])
                 for i in range(0, len(frames), every)]
    psnrs, ssims, d1s = [], [], []
    for i, color, depth, pose in views:
        view = render_view(runner, pose, K)
        psnrs.append(psnr(view["color"], color))
        ssims.append(ssim(view["color"], color))
        mask = (depth > 0) & (view["depth"] > 0)
        if mask.any():
            d1s.append(depth_l1(view["depth"], depth, mask))
        report.save_image(os.path.join(outdir, f"render_{i:06d}.png"),
                          view["color"])
        report.save_image(os.path.join(outdir, f"depth_{i:06d}.png"),
                          view["depth"])
    if psnrs:
        metrics["psnr_db"] = float(np.mean(psnrs))
        metrics["ssim"] = float(np.mean(ssims))
    if d1s:
        metrics["depth_l1_cm"] = float(np.mean(d1s))

    if isinstance(runner, NerfSlam):
        mesh = extract_mesh(runner.map.sdf_numpy,
                            runner.map.geometry.bbox_lo,
                            runner.map.geometry.bbox_hi,
                            cfg["eval.mesh_voxel"])
        poses = [p for _, p in traj]
        mesh = cull_mesh(mesh, poses, K, [f.depth for f in frames])
        mesh_to_ply(os.path.join(outdir, "mesh.ply"), mesh)
        if scene is not None and len(mesh.triangles):
            gt_pts = sample_scene_surface(scene, 20_000, seed=cfg["seed"])
            seen = observed_mask(gt_pts, poses, K, [f.depth for f in frames])
            if seen.any():
                acc, comp, rate = mesh_metrics(mesh, gt_pts[seen])
                metrics["accuracy_cm"] = acc
                metrics["completion_cm"] = comp
                metrics["completion_rate_pct"] = rate
        save_checkpoint_nerf(os.path.join(outdir, "map.dsk"), runner.map, K)
    else:
        save_ply(os.path.join(outdir, "gaussians.ply"), runner.map)
        save_checkpoint_gs(os.path.join(outdir, "map.dsk"), runner.map, K)

    write_metrics_json(os.path.join(outdir, "metrics.json"), metrics)
    report.plot_trajectory(os.path.join(outdir, "trajectory.png"), traj, gt)
    if runner.loss_history:
        report.plot_loss(os.path.join(outdir, "loss.png"), runner.loss_history)
    return {"metrics": metrics, "trajectory": traj, "runner": runner,
            "frames": frames, "intrinsics": K, "scene": scene, "gt": gt}


# --- checkpoints --------------------------------------------------------------

def _meta_intrinsics(K: CameraIntrinsics) -> np.ndarray:
    return np.array([K.fx, K.fy, K.cx, K.cy, K.width, K.height, K.depth_scale],
                    np.float32)


def _intrinsics_from(arr: np.ndarray) -> CameraIntrinsics:
    return CameraIntrinsics(float(arr[0]), float(arr[1]), float(arr[2]),
                            float(arr[3]), int(arr[4]), int(arr[5]),
                            float(arr[6]))


def save_checkpoint_nerf(path, nerf: NerfMap, K: CameraIntrinsics) -> None:
    t = {k: v for k, v in nerf.parameters().items()}
    t["meta.backend"] = np.array([0.0], np.float32)
    t["meta.bbox"] = np.stack([nerf.geometry.bbox_lo, nerf.geometry.bbox_hi]
                              ).astype(np.float32)
    t["meta.geo_cells"] = np.array(nerf.geometry.cell_sizes, np.float32)
    t["meta.app_cells"] = np.array(nerf.appearance.cell_sizes, np.float32)
    t["meta.dims"] = np.array(
        [nerf.geometry.channels, nerf.appearance.channels,
         nerf.feature.channels, nerf.feature_dim], np.float32)
    t["meta.truncation"] = np.array([nerf.truncation], np.float32)
    t["meta.intrinsics"] = _meta_intrinsics(K)
    engine.save_checkpoint(path, t)


def save_checkpoint_gs(path, gmap: GaussianMap, K: CameraIntrinsics) -> None:
    t = {k: v for k, v in gmap.parameters().items()}
    t["gs.source_keyframe"] = gmap.source_keyframe.astype(np.float32)
    t["meta.backend"] = np.array([1.0], np.float32)
    t["meta.feature_dim"] = np.array([gmap.feature_dim], np.float32)
    t["meta.intrinsics"] = _meta_intrinsics(K)
    engine.save_checkpoint(path, t)


def load_checkpoint_map(path):
    """Rebuild (map, intrinsics, backend name) from a checkpoint."""
    t = engine.load_checkpoint(path)
    K = _intrinsics_from(t["meta.intrinsics"])
    if int(t["meta.backend"][0]) == 1:
        gmap = GaussianMap(int(t["meta.feature_dim"][0]))
        n = len(t["gs.mu"])
        if n:
            r = np.exp(t["gs.log_r"])
            o = 1.0 / (1.0 + np.exp(-t["gs.logit_o"]))
            c = 1.0 / (1.0 + np.exp(-t["gs.logit_c"]))
            gmap.add(t["gs.mu"], r, o, c, t["gs.fed"], 0)
            gmap.source_keyframe = t["gs.source_keyframe"].astype(np.int64)
        return gmap, K, "gs"
    lo, hi = t["meta.bbox"]
    geo_c, app_c, feat_c, fdim = [int(x) for x in t["meta.dims"]]
    nerf = NerfMap.create(
        lo, hi, feature_dim=fdim, edino_dim=2 * feat_c,
        geo_cells=tuple(t["meta.geo_cells"]), app_cells=tuple(t["meta.app_cells"]),
        geo_channels=geo_c, app_channels=app_c,
        truncation=float(t["meta.truncation"][0]),
    )
    params = nerf.parameters()
    with torch.no_grad():
        for name, p in params.items():
            if name in t:
                p.copy_(torch.as_tensor(t[name].reshape(p.shape)))
    return nerf, K, "nerf"
