import numpy as np
import torch

from deskslam.config import RunConfig
from deskslam.slam import load_dataset, make_feature_provider, build_runner
from deskslam.geometry import motion_metrics, se3_exp, apply_twist_torch, pose_from_twist
from deskslam.nerf.model import render_rays, sample_rays, pixel_rays_torch
from deskslam.engine import AdamState, adam_step, backward, tensor
from deskslam import engine


def run_track(runner, frame, init_pose, iters, dw, lr, pixels=1024, seed=0):
    cfg = runner.cfg
    rng = np.random.default_rng(seed)
    vs0, us0 = np.nonzero(frame.depth > 0)
    sel = rng.choice(len(us0), size=min(pixels, len(us0)), replace=False)
    us, vs = us0[sel].astype(np.float32), vs0[sel].astype(np.float32)
    vi, ui = vs.astype(int), us.astype(int)
    t_color = tensor(frame.color[vi, ui])
    dep = frame.depth[vi, ui]
    t_depth = tensor(dep)
    z = tensor(sample_rays(dep, cfg.near, cfg.far, cfg.n_strat, cfg.n_surf,
                           cfg.truncation, rng))
    ust, vst = tensor(us), tensor(vs)
    twist = torch.zeros(6, requires_grad=True)
    adam = AdamState(lr=lr)
    best, best_loss, keep = np.zeros(6), None, None
    valid = t_depth > 0
    for it in range(iters + 1):
        R, t = apply_twist_torch(twist, init_pose)
        o, d = pixel_rays_torch(runner.K, R, t, ust, vst)
        out = render_rays(runner.map, o, d, z, want_feat=False)
        res = out["depth"] - t_depth
        if keep is None:
            opaque = out["weights"].detach().sum(-1) > 0.5
            keep = valid & opaque
            if keep.any():
                med = res[keep].detach().abs().median()
                keep = keep & (res.detach().abs() < 10 * med + 1e-6)
            if not keep.any():
                keep = valid
        l_c = ((out["color"] - t_color)[keep] ** 2).mean()
        l_d = (res[keep] ** 2).mean()
        loss = l_c + dw * l_d
        lv = float(loss.detach())
        if best_loss is None or lv < best_loss:
            best_loss, best = lv, twist.detach().numpy().copy()
        g = backward(loss, {"twist": twist})
        decay = 0.5 ** (3 * it // max(1, iters + 1))
        adam_step(adam, {"twist": twist}, g, {"twist": decay})
    return pose_from_twist(best, init_pose)


def main():
    cfg = RunConfig.default()
    cfg.set("backend", "nerf")
    cfg.set("frames", 8)
    cfg.set("trajectory.span_deg", 50.4)
    frames, K, scene, gt = load_dataset(cfg)
    prov = make_feature_provider(cfg, scene, K)
    runner = build_runner(cfg, K, scene)
    for fr in frames[:4]:
        runner.add_frame(fr, prov(fr), fr.gt_pose)
    runner.cfg.lr_pose_map = 0.0
    runner.map_window(iters=300)
    print("map trained, loss", runner.loss_history[-1])

    rng = np.random.default_rng(3)
    fr = frames[3]
    perturbs = [rng.normal(0, 0.02, 6) for _ in range(3)]
    for dw in (0.1, 1.0, 5.0):
        for lr in (0.01, 0.05):
            rows = []
            for k, tw in enumerate(perturbs):
                init = se3_exp(tw).compose(fr.gt_pose)
                pose = run_track(runner, fr, init, 30, dw, lr, seed=k)
                d0, _ = motion_metrics(init, fr.gt_pose)
                d1, _ = motion_metrics(pose, fr.gt_pose)
                rows.append((round(d0 * 100, 1), round(d1 * 100, 2)))
            print(f"dw={dw} lr={lr}:", rows)


if __name__ == "__main__":
    main()
