import sys, time
import numpy as np
from deskslam.config import RunConfig
from deskslam.datasets import default_scene, default_intrinsics, make_trajectory, render_synthetic
from deskslam.features import synth_features
from deskslam.slam import build_runner, make_feature_provider
from deskslam.geometry import motion_metrics

variant = sys.argv[1]
N = 12
cfg = RunConfig.default()
scene = default_scene()
K = default_intrinsics(cfg["image.width"], cfg["image.height"])
traj = make_trajectory("orbit", 50, {"radius":1.5,"height":0.9,"span_deg":72.0,"center":(0,0,0.6)})[:N]
runner = build_runner(cfg, K, scene)
gc = runner.cfg
if variant == "iters60": gc.tracking_iters = 60
elif variant == "noreject": gc.track_outlier_factor = 0.0
elif variant == "reject25": gc.track_outlier_factor = 25.0
elif variant == "lr4": gc.lr_track = 0.04
elif variant == "base": pass
provider = make_feature_provider(cfg, scene, K)
t0=time.time()
for i, pose in enumerate(traj):
    frame = render_synthetic(scene, pose, K, frame_id=i, timestamp=float(i))
    feats = provider(frame)
    est = runner.process_frame(frame, feats)
    if i>0:
        motion = traj[i].center()-traj[i-1].center()
        mdir = motion/np.linalg.norm(motion)
        err = est.center()-pose.center()
        print(f"{variant} f{i} err {np.linalg.norm(err)*100:.2f}cm along {err@mdir*100:+.2f}cm", flush=True)
print(f"{variant} TOTAL {time.time()-t0:.0f}s")
