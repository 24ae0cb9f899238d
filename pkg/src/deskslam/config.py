"""Run configuration: flat key=value files with CLI overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError

# key -> (default, type)
SCHEMA = {
    "backend": ("gs", str),
    "dataset": ("synthetic:builtin", str),
    "features": ("synthetic", str),
    "frames": (50, int),
    "seed": (0, int),
    "out": ("out", str),
    "deterministic": (False, bool),

    "image.width": (160, int),
    "image.height": (120, int),

    "trajectory.kind": ("orbit", str),
    "trajectory.radius": (1.5, float),
    "trajectory.height": (0.9, float),
    "trajectory.span_deg": (72.0, float),
    "trajectory.center": ("0,0,0.6", str),

    "features.dim": (16, int),
    "features.patch_stride": (8, int),
    "sse.width": (16, int),
    "sse.trainable": (False, bool),

    "nerf.n_strat": (32, int),
    "nerf.n_surf": (8, int),
    "nerf.pixels_per_step": (2048, int),
    "nerf.window": (8, int),
    "nerf.keyframe_every": (4, int),
    "nerf.truncation": (0.06, float),
    "nerf.beta_init": (10.0, float),
    "nerf.tracking_iters": (8, int),
    "nerf.mapping_iters": (15, int),
    "nerf.first_mapping_iters": (150, int),
    "nerf.tracking_pixels": (1024, int),
    "nerf.lr_planes": (0.02, float),
    "nerf.lr_decoders": (2e-3, float),
    "nerf.lr_track": (5e-2, float),
    "nerf.lr_pose_map": (1e-3, float),
    "nerf.geo_coarse_cm": (24.0, float),
    "nerf.geo_fine_cm": (6.0, float),
    "nerf.app_coarse_cm": (24.0, float),
    "nerf.app_fine_cm": (3.0, float),
    "nerf.lambda_color": (5.0, float),
    "nerf.lambda_depth": (0.1, float),
    "nerf.lambda_ef": (5.0, float),
    "nerf.lambda_df": (0.01, float),
    "nerf.lambda_fs": (5.0, float),
    "nerf.lambda_sdf": (200.0, float),
    "nerf.lambda_tr": (10.0, float),

    "gs.tracking_iters": (30, int),
    "gs.mapping_iters": (30, int),
    "gs.first_mapping_iters": (300, int),
    "gs.keyframe_every": (4, int),
    "gs.ba_every": (10, int),
    "gs.ba_iters": (50, int),
    "gs.lambda_color": (1.0, float),
    "gs.lambda_depth": (1.0, float),
    "gs.lambda_df": (1.0, float),
    "gs.prune_opacity": (0.05, float),
    "gs.seed_subsample": (2, int),
    "gs.seed_radius_px": (1.5, float),
    "gs.lr_track": (2e-2, float),
    "gs.lr_pose_map": (2e-3, float),

    "eval.mesh_voxel": (0.02, float),
    "eval.render_every": (10, int),
}


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def default(cls) -> "RunConfig":
        cfg = cls({k: v[0] for k, v in SCHEMA.items()})
        env_seed = os.environ.get("DSK_SEED")
        if env_seed is not None:
            cfg.values["seed"] = int(env_seed)
        return cfg

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ = SCHEMA[key][1]
        try:
            if typ is bool and isinstance(raw, str):
                self.values[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            else:
                self.values[key] = typ(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {raw!r}") from e

    def update_from_file(self, path) -> None:
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{ln}: expected key=value")
                k, v = line.split("=", 1)
                self.set(k.strip(), v.strip())

    def dump(self) -> str:
        lines = []
        for key in SCHEMA:
            val = self.values[key]
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"

    def vec3(self, key):
        return [float(x) for x in str(self[key]).split(",")]
