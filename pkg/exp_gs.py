import time
import numpy as np
import torch

torch.set_num_threads(1)

from deskslam import slam as S
from deskslam import evaluation as E
from deskslam.config import RunConfig
from deskslam import geometry as G

cfg = RunConfig.default()
cfg.set("backend", "gs")
cfg.set("frames", 8)
cfg.set("trajectory.span_deg", 10.08)
cfg.set("seed", 0)

frames, K, scene, gt = S.load_dataset(cfg)
fp = S.make_feature_provider(cfg, scene, K)
runner = S.build_runner(cfg, K, scene)

t0 = time.time()
for i, fr in enumerate(frames):
    pose = runner.process_frame(fr, fp(fr))
    dt, dr = G.motion_metrics(pose, gt[i][1])
    print(f"frame {i}: err {dt*100:6.2f} cm / {dr:5.2f} deg  "
          f"N={len(runner.map)}  kfs={len(runner.keyframes)}  "
          f"t={time.time()-t0:.0f}s", flush=True)

est = runner.trajectory()
errs = [G.motion_metrics(p, q)[0] * 100 for (_, p), (_, q) in zip(est, gt)]
print("final per-frame err cm:", np.round(errs, 2))
print("ate cm:", E.ate_rmse(est, gt))

ps, dl = [], []
for i in (0, 3, 7):
    out = S.render_view(runner, est[i][1], K)
    c = out["color"]
    d = out["depth"]
    ps.append(E.psnr(c, frames[i].color))
    m = frames[i].depth > 0
    dl.append(np.abs(d - frames[i].depth)[m].mean())
print("psnr:", np.mean(ps), " depth l1 cm:", np.mean(dl) * 100)
