"""Tri-plane scene representation with SDF-based volume rendering.

Three tri-plane sets encode geometry, appearance, and enriched-feature
channels at two resolutions each; shallow two-layer decoders map queried
encodings to an SDF value, RGB, and a feature vector. Rendering converts SDF
to density via sigma = beta * sigmoid(-beta * s) and composites with
termination weights w_n = exp(-sum_{k<n} sigma_k) * (1 - exp(-sigma_n)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import engine
from ..errors import InvalidRange, MissingTargets
from ..geometry import CameraIntrinsics, Pose

PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # xy, xz, yz
DECODER_HIDDEN = 32


@dataclass
class TriPlane:
    """Three axis-aligned feature planes per resolution level (coarse, fine)."""

    name: str
    channels: int
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    cell_sizes: tuple  # meters per cell, one per level
    planes: list = field(default_factory=list)  # [level][plane] -> (C, H, W)

    @classmethod
    def create(cls, name, channels, bbox_lo, bbox_hi, cell_sizes, rng,
               init_scale=0.01):
        tp = cls(name, channels, np.asarray(bbox_lo, float),
                 np.asarray(bbox_hi, float), tuple(cell_sizes))
        ext = tp.bbox_hi - tp.bbox_lo
        for cell in tp.cell_sizes:
            level = []
            for (a, b) in PLANE_AXES:
                h = int(np.ceil(ext[b] / cell)) + 1
                w = int(np.ceil(ext[a] / cell)) + 1
                level.append(engine.tensor(
                    rng.normal(0.0, init_scale, size=(channels, h, w))
                    .astype(np.float32)))
            tp.planes.append(level)
        return tp

    @property
    def out_dim(self) -> int:
        return self.channels * len(self.cell_sizes)

    def tensors(self) -> dict:
        return {
            f"{self.name}.l{li}.p{pi}": self.planes[li][pi]
            for li in range(len(self.planes))
            for pi in range(3)
        }


def query_triplane(tp: TriPlane, pts: torch.Tensor) -> torch.Tensor:
    """Query (N, 3) points: per level, sum of the three plane lookups; levels
    concatenated. Points are clamped to the bounding box."""
    lo = torch.as_tensor(tp.bbox_lo, dtype=pts.dtype)
    hi = torch.as_tensor(tp.bbox_hi, dtype=pts.dtype)
    p = torch.minimum(torch.maximum(pts, lo), hi) - lo
    outs = []
    for level, cell in zip(tp.planes, tp.cell_sizes):
        q = p / cell
        acc = None
        for grid, (a, b) in zip(level, PLANE_AXES):
            v = engine.bilinear_sample(grid, q[:, (a, b)])
            acc = v if acc is None else acc + v
        outs.append(acc)
    return torch.cat(outs, dim=1)


def _decoder_init(rng, n_in, n_out):
    a = np.sqrt(6.0 / (n_in + DECODER_HIDDEN))
    w1 = rng.uniform(-a, a, size=(n_in, DECODER_HIDDEN)).astype(np.float32)
    a2 = np.sqrt(6.0 / (DECODER_HIDDEN + n_out))
    w2 = rng.uniform(-a2, a2, size=(DECODER_HIDDEN, n_out)).astype(np.float32)
    return {
        "w1": engine.tensor(w1),
        "b1": engine.tensor(np.zeros(DECODER_HIDDEN, np.float32)),
        "w2": engine.tensor(w2),
        "b2": engine.tensor(np.zeros(n_out, np.float32)),
    }


def _decode(dec: dict, x: torch.Tensor) -> torch.Tensor:
    return engine.relu(x @ dec["w1"] + dec["b1"]) @ dec["w2"] + dec["b2"]


@dataclass
class NerfMap:
    """Tri-plane sets + decoders + the learnable density sharpness."""

    geometry: TriPlane
    appearance: TriPlane
    feature: TriPlane
    dec_g: dict
    dec_a: dict
    dec_d: dict
    log_beta: torch.Tensor
    truncation: float
    feature_dim: int

    @classmethod
    def create(cls, bbox_lo, bbox_hi, feature_dim: int, edino_dim: int,
               geo_cells=(0.24, 0.06), app_cells=(0.24, 0.03),
               geo_channels: int = 16, app_channels: int = 16,
               truncation: float = 0.06, beta_init: float = 10.0,
               seed: int = 0) -> "NerfMap":
        if edino_dim % 2:
            raise ValueError("enriched feature width must be even")
        rng = np.random.default_rng(seed)
        geo = TriPlane.create("tri.g", geo_channels, bbox_lo, bbox_hi, geo_cells, rng)
        app = TriPlane.create("tri.a", app_channels, bbox_lo, bbox_hi, app_cells, rng)
        # concatenated feature-plane query width must equal the enriched width
        feat = TriPlane.create("tri.d", edino_dim // 2, bbox_lo, bbox_hi,
                               app_cells, rng)
        m = cls(
            geometry=geo, appearance=app, feature=feat,
            dec_g=_decoder_init(rng, geo.out_dim, 1),
            dec_a=_decoder_init(rng, app.out_dim, 3),
            dec_d=_decoder_init(rng, feat.out_dim, feature_dim),
            log_beta=engine.tensor(np.log(beta_init)),
            truncation=truncation,
            feature_dim=feature_dim,
        )
        for t in m.parameters().values():
            t.requires_grad_(True)
        return m

    @property
    def beta(self) -> torch.Tensor:
        return torch.exp(self.log_beta)

    def parameters(self) -> dict:
        out = {}
        out.update(self.geometry.tensors())
        out.update(self.appearance.tensors())
        out.update(self.feature.tensors())
        for name, dec in (("dec.g", self.dec_g), ("dec.a", self.dec_a),
                          ("dec.d", self.dec_d)):
            for k, v in dec.items():
                out[f"{name}.{k}"] = v
        out["log_beta"] = self.log_beta
        return out

    def sdf(self, pts: torch.Tensor) -> torch.Tensor:
        return _decode(self.dec_g, query_triplane(self.geometry, pts))[:, 0]

    def color(self, pts: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(_decode(self.dec_a, query_triplane(self.appearance, pts)))

    def feat(self, pts: torch.Tensor) -> torch.Tensor:
        return _decode(self.dec_d, query_triplane(self.feature, pts))

    def sdf_numpy(self, pts: np.ndarray, chunk: int = 200_000) -> np.ndarray:
        out = np.empty(len(pts), dtype=np.float32)
        with torch.no_grad():
            for i in range(0, len(pts), chunk):
                p = engine.tensor(pts[i : i + chunk])
                out[i : i + chunk] = self.sdf(p).numpy()
        return out


def sdf_to_density(s, beta, truncation: float = 1.0):
    """sigma = beta * sigmoid(-beta * s / tr); beta controls surface sharpness.

    The SDF is expressed in truncation-distance units before the sigmoid so
    that free space (s >= tr) contributes negligible density at beta ~ 10.
    """
    if isinstance(s, torch.Tensor) or isinstance(beta, torch.Tensor):
        if not isinstance(s, torch.Tensor):
            s = torch.as_tensor(
                s, dtype=beta.dtype if isinstance(beta, torch.Tensor)
                else torch.float32)
        return beta * torch.sigmoid(-beta * s / truncation)
    return beta / (1.0 + np.exp(beta * s / truncation))


def termination_weights(sigma: torch.Tensor) -> torch.Tensor:
    """w_n = exp(-sum_{k<n} sigma_k) * (1 - exp(-sigma_n)) along the last axis."""
    csum = torch.cumsum(sigma, dim=-1)
    prev = csum - sigma  # exclusive prefix sum
    return torch.exp(-prev) * (1.0 - torch.exp(-sigma))


def render_rays(nerf: NerfMap, origins: torch.Tensor, dirs: torch.Tensor,
                z_vals: torch.Tensor, want_feat: bool = True,
                want_plane_feat: bool = False) -> dict:
    """Composite SDF/color/feature queries along rays.

    origins (R,3), dirs (R,3) (z-depth parameterization: depth = z * 1 along
    the camera axis), z_vals (R,N) ascending. Returns weights, color, depth,
    rendered features, raw SDF values, and optionally the volume-rendered raw
    feature-plane query (stop-gradient weights) used by the encoding loss.
    """
    R, N = z_vals.shape
    pts = (origins[:, None, :] + dirs[:, None, :] * z_vals[..., None]).reshape(-1, 3)
    sdf = nerf.sdf(pts).reshape(R, N)
    sigma = sdf_to_density(sdf, nerf.beta, nerf.truncation)
    w = termination_weights(sigma)
    color = (w[..., None] * nerf.color(pts).reshape(R, N, 3)).sum(dim=1)
    depth = (w * z_vals).sum(dim=1)
    out = {"weights": w, "color": color, "depth": depth, "sdf": sdf, "z_vals": z_vals}
    if want_feat or want_plane_feat:
        raw = query_triplane(nerf.feature, pts)
        if want_feat:
            dec = _decode(nerf.dec_d, raw).reshape(R, N, -1)
            out["feat"] = (w[..., None] * dec).sum(dim=1)
        if want_plane_feat:
            raw = raw.reshape(R, N, -1)
            out["plane_feat"] = (w.detach()[..., None] * raw).sum(dim=1)
    return out


def sample_ray(sensor_depth: float, near: float, far: float, n_strat: int,
               n_surf: int, truncation: float, rng: np.random.Generator):
    """Per-ray sample depths: stratified band plus a near-surface band.

    Invalid sensor depth (<= 0 or non-finite) yields exactly n_strat samples.
    """
    if not near < far:
        raise InvalidRange(f"near {near} must be < far {far}")
    u = rng.random(n_strat)
    z = near + (far - near) * (np.arange(n_strat) + u) / n_strat
    if sensor_depth and np.isfinite(sensor_depth) and sensor_depth > 0:
        lo = max(near, sensor_depth - truncation)
        hi = min(far, sensor_depth + truncation)
        zs = lo + (hi - lo) * rng.random(n_surf)
        z = np.concatenate([z, zs])
    return np.sort(z)


def sample_rays(sensor_depth: np.ndarray, near: float, far: float,
                n_strat: int, n_surf: int, truncation: float,
                rng: np.random.Generator) -> np.ndarray:
    """Vectorized sampler for a batch of rays; all get n_strat + n_surf samples
    (rays with invalid depth fill the surface band with stratified samples)."""
    if not near < far:
        raise InvalidRange(f"near {near} must be < far {far}")
    R = len(sensor_depth)
    u = rng.random((R, n_strat))
    z = near + (far - near) * (np.arange(n_strat)[None, :] + u) / n_strat
    valid = np.isfinite(sensor_depth) & (sensor_depth > 0)
    lo = np.where(valid, np.maximum(near, sensor_depth - truncation), near)
    hi = np.where(valid, np.minimum(far, sensor_depth + truncation), far)
    zs = lo[:, None] + (hi - lo)[:, None] * rng.random((R, n_surf))
    return np.sort(np.concatenate([z, zs], axis=1), axis=1).astype(np.float32)


DEFAULT_LOSS_WEIGHTS = {
    "color": 5.0,
    "depth": 0.1,
    "ef": 5.0,       # enriched-feature encoding loss
    "df": 0.01,      # rendered-feature loss
    "fs": 5.0,       # free space
    "sdf_near": 200.0,
    "sdf_far": 10.0,
}


def mapping_loss(nerf: NerfMap, render: dict, targets: dict,
                 weights: dict | None = None):
    """Weighted sum of photometric, depth, feature, and SDF-band losses.

    targets: color (R,3), depth (R,), feat (R,D) per-pixel upsampled token
    features, edino (R,E) per-pixel enriched targets. Depth-dependent terms
    mask rays with invalid sensor depth.
    """
    w = dict(DEFAULT_LOSS_WEIGHTS)
    if weights:
        w.update(weights)
    for key in ("color", "depth"):
        if key not in targets:
            raise MissingTargets(f"missing target {key!r}")

    comps = {}
    tc = targets["color"]
    comps["color"] = ((render["color"] - tc) ** 2).mean()

    td = targets["depth"]
    valid = td > 0
    nv = valid.sum()
    if nv > 0:
        comps["depth"] = ((render["depth"] - td)[valid] ** 2).mean()
    else:
        comps["depth"] = render["depth"].sum() * 0.0

    if "feat" in targets and w["df"] != 0:
        comps["df"] = (render["feat"] - targets["feat"]).abs().mean()
    if "edino" in targets and "plane_feat" in render and w["ef"] != 0:
        comps["ef"] = (render["plane_feat"] - targets["edino"]).abs().mean()

    # truncation-band SDF supervision (valid-depth rays only)
    if nv > 0:
        tr = nerf.truncation
        z = render["z_vals"][valid]
        sdf = render["sdf"][valid]
        d = td[valid][:, None]
        front = z < d - tr
        band = (z >= d - tr) & (z <= d + tr)
        back = z > d + tr
        if front.any():
            comps["fs"] = ((sdf[front] - tr) ** 2).mean()
        if band.any():
            comps["sdf_near"] = ((sdf[band] - (d.expand_as(z)[band] - z[band])) ** 2).mean()
        if back.any():
            comps["sdf_far"] = ((sdf[back] + tr) ** 2).mean()

    total = sum(w[k] * v for k, v in comps.items())
    return total, comps


def pixel_rays_torch(K: CameraIntrinsics, R: torch.Tensor, t: torch.Tensor,
                     us: torch.Tensor, vs: torch.Tensor):
    """World-frame ray origins/dirs for pixel coords, differentiable in (R, t).

    Directions carry unit camera-z so the sample parameter equals z-depth.
    """
    dirs_cam = torch.stack(
        [(us - K.cx) / K.fx, (vs - K.cy) / K.fy, torch.ones_like(us)], dim=1
    )
    R_wc = R.T
    center = -R_wc @ t
    dirs = dirs_cam @ R_wc.T
    origins = center[None, :].expand_as(dirs)
    return origins, dirs


def render_image(nerf: NerfMap, pose: Pose, K: CameraIntrinsics,
                 near: float, far: float, n_strat: int = 48,
                 chunk: int = 4096, seed: int = 0,
                 want_feat: bool = False) -> dict:
    """Full-frame render with stratified-only sampling (no sensor depth)."""
    H, W = K.height, K.width
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:H, 0:W]
    us = engine.tensor(u.ravel().astype(np.float32))
    vs = engine.tensor(v.ravel().astype(np.float32))
    Rt = engine.tensor(pose.R)
    tt = engine.tensor(pose.t)
    color = np.zeros((H * W, 3), np.float32)
    depth = np.zeros(H * W, np.float32)
    feat = None
    with torch.no_grad():
        origins, dirs = pixel_rays_torch(K, Rt, tt, us, vs)
        for i in range(0, H * W, chunk):
            n = min(chunk, H * W - i)
            z = sample_rays(np.zeros(n), near, far, n_strat, 0,
                            nerf.truncation, rng)
            coarse = render_rays(nerf, origins[i : i + n], dirs[i : i + n],
                                 engine.tensor(z), want_feat=False)
            # refine around the coarse surface estimate: without sensor depth
            # the stratified spacing is far wider than the truncation band
            d0 = coarse["depth"].numpy()
            hit = coarse["weights"].sum(dim=-1).numpy() > 0.1
            guide = np.where(hit, d0, 0.0)
            z2 = sample_rays(guide, near, far, n_strat, 16,
                             2 * nerf.truncation, rng)
            out = render_rays(nerf, origins[i : i + n], dirs[i : i + n],
                              engine.tensor(z2), want_feat=want_feat)
            color[i : i + n] = out["color"].numpy()
            depth[i : i + n] = out["depth"].numpy()
            if want_feat:
                if feat is None:
                    feat = np.zeros((H * W, out["feat"].shape[1]), np.float32)
                feat[i : i + n] = out["feat"].numpy()
    res = {"color": color.reshape(H, W, 3), "depth": depth.reshape(H, W)}
    if want_feat:
        res["feat"] = feat.reshape(H, W, -1)
    return res
