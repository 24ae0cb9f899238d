import numpy as np

from deskslam.config import RunConfig
from deskslam.slam import load_dataset, make_feature_provider, build_runner
from deskslam.nerf.model import render_image
from deskslam.evaluation import psnr, depth_l1
from deskslam.geometry import motion_metrics, se3_exp

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
print("loss:", runner.loss_history[-1], "beta:", float(runner.map.beta))
fr = frames[3]
view = render_image(runner.map, fr.gt_pose, K, 0.05, runner.cfg.far)
m = (fr.depth > 0) & (view["depth"] > 0)
print("psnr:", psnr(view["color"], fr.color))
print("depth l1 cm:", depth_l1(view["depth"], fr.depth, m))
print("depth bias cm:", float((view["depth"] - fr.depth)[m].mean() * 100))

# isolated tracking from perturbed inits
from exp_track import run_track
rng = np.random.default_rng(3)
for scale, label in ((0.007, "1cm/0.5deg"), (0.02, "3cm/1.5deg")):
    rows = []
    for k in range(3):
        tw = rng.normal(0, scale, 6)
        init = se3_exp(tw).compose(fr.gt_pose)
        pose = run_track(runner, fr, init, 50, dw=1.0, lr=0.01, seed=k)
        d0, _ = motion_metrics(init, fr.gt_pose)
        d1, r1 = motion_metrics(pose, fr.gt_pose)
        rows.append((round(d0 * 100, 2), round(d1 * 100, 2), round(r1, 2)))
    print(label, rows)
