import time, json
import torch
torch.set_num_threads(1)
from deskslam import slam as S
from deskslam.config import RunConfig

cfg = RunConfig.default()
cfg.set("backend", "gs")
cfg.set("out", "/tmp/gs_full")
t0 = time.time()
res = S.run(cfg, progress=lambda i, n: print(f"frame {i+1}/{n} t={time.time()-t0:.0f}s", flush=True))
print("TOTAL s:", time.time() - t0)
print(json.dumps(res["metrics"], indent=1))
