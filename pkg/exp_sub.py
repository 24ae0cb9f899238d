import numpy as np, torch, time
torch.set_num_threads(1)
from deskslam import slam as S, engine, evaluation as E
from deskslam.config import RunConfig
from deskslam import geometry as G
from deskslam.gs.model import rasterize

cfg = RunConfig.default()
cfg.set("backend","gs"); cfg.set("frames",8)
cfg.set("trajectory.span_deg", 10.08)
frames, K, scene, gt = S.load_dataset(cfg)
fp = S.make_feature_provider(cfg, scene, K)

cfg.set("gs.seed_subsample", 1)
runner = S.build_runner(cfg, K, scene)
kf = runner._make_keyframe(frames[0], fp(frames[0]), gt[0][1])
runner.keyframes.append(kf)
runner.densify_and_prune(kf)
t0 = time.time()
for it in range(400):
    runner.map_step(kf)
    if it % 100 == 99:
        print(f"it {it+1} loss {runner.loss_history[-1]:.4f} t={time.time()-t0:.0f}s", flush=True)
with torch.no_grad():
    out = rasterize(runner.map, gt[0][1], K, want_feature=False)
d = out["depth"].numpy(); m = frames[0].depth > 0
print(f"N={len(runner.map)} dl1 {np.abs(d-frames[0].depth)[m].mean()*100:.2f}cm "
      f"psnr {E.psnr(out['color'].numpy(), frames[0].color):.1f}", flush=True)
for i in (1, 2):
    init = gt[0][1] if i == 1 else gt[i][1]
    t1 = time.time()
    pose = runner.track(frames[i], init, iters=30)
    dt, dr = G.motion_metrics(pose, gt[i][1])
    print(f"frame {i}: err {dt*100:.2f}cm {dr:.3f}deg track_t={time.time()-t1:.0f}s", flush=True)
