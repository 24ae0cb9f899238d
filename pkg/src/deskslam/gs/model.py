"""Isotropic Gaussian scene model and the differentiable tile rasterizer.

Each Gaussian carries position mu, radius r, opacity o, color c, and a feature
channel. Projection follows mu_2d = pi(T_CW mu), Sigma_2d = J W Sigma W^T J^T,
which for Sigma = r^2 I reduces to r^2 J J^T; per-pixel opacity is the
screen-space Gaussian alpha = o * exp(-0.5 d^T Sigma_2d^{-1} d), cut to zero
outside the 3-sigma ellipse, and fragments are alpha-composited front to back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .. import engine
from ..errors import BehindCamera
from ..geometry import CameraIntrinsics, Pose

COV_REG = 0.3          # pixel^2 floor added to Sigma_2d before inversion
ALPHA_MAX = 0.99
ALPHA_CUTOFF_POWER = -4.5   # 3-sigma Mahalanobis cutoff
T_MIN = 1e-4           # stop compositing once transmittance drops below this
MIN_Z = 0.01
TILE = 16


@dataclass
class SplatFragment:
    gaussian_id: int
    mu_2d: np.ndarray       # pixel
    sigma_2d: np.ndarray    # 2x2, pixel^2 (regularized)
    z: float                # camera depth
    bbox: tuple             # (x0, y0, x1, y1) clipped to the image, exclusive hi


@dataclass
class GaussianMap:
    """Growable Gaussian set; parameters live in unconstrained tensors."""

    feature_dim: int
    mu: torch.Tensor = None          # (N, 3)
    log_r: torch.Tensor = None       # (N,)
    logit_o: torch.Tensor = None     # (N,)
    logit_c: torch.Tensor = None     # (N, 3)
    fed: torch.Tensor = None         # (N, E)
    source_keyframe: np.ndarray = field(
        default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.mu is None:
            self.mu = engine.tensor(np.zeros((0, 3), np.float32), True)
            self.log_r = engine.tensor(np.zeros(0, np.float32), True)
            self.logit_o = engine.tensor(np.zeros(0, np.float32), True)
            self.logit_c = engine.tensor(np.zeros((0, 3), np.float32), True)
            self.fed = engine.tensor(
                np.zeros((0, self.feature_dim), np.float32), True)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def r(self) -> torch.Tensor:
        return torch.exp(self.log_r)

    @property
    def o(self) -> torch.Tensor:
        return torch.sigmoid(self.logit_o)

    @property
    def c(self) -> torch.Tensor:
        return torch.sigmoid(self.logit_c)

    def parameters(self) -> dict:
        return {
            "gs.mu": self.mu, "gs.log_r": self.log_r, "gs.logit_o": self.logit_o,
            "gs.logit_c": self.logit_c, "gs.fed": self.fed,
        }

    def add(self, mu, r, o, c, fed, source_keyframe: int):
        """Append Gaussians (plain arrays); returns count added."""
        mu = np.atleast_2d(np.asarray(mu, np.float32))
        n = len(mu)
        if n == 0:
            return 0
        eps = 1e-5
        with torch.no_grad():
            def cat(t, new):
                return engine.tensor(
                    np.concatenate([t.detach().numpy(), new.astype(np.float32)]),
                    True)
            self.mu = cat(self.mu, mu)
            self.log_r = cat(self.log_r, np.log(np.maximum(r, 1e-5)))
            self.logit_o = cat(self.logit_o, np.log(
                np.clip(o, eps, 1 - eps) / (1 - np.clip(o, eps, 1 - eps))))
            cc = np.clip(c, eps, 1 - eps)
            self.logit_c = cat(self.logit_c, np.log(cc / (1 - cc)))
            self.fed = cat(self.fed, np.atleast_2d(fed))
        self.source_keyframe = np.concatenate(
            [self.source_keyframe, np.full(n, source_keyframe, np.int64)])
        return n

    def keep(self, mask: np.ndarray):
        """Retain only the Gaussians selected by the boolean mask."""
        with torch.no_grad():
            for name in ("mu", "log_r", "logit_o", "logit_c", "fed"):
                t = getattr(self, name)
                setattr(self, name,
                        engine.tensor(t.detach().numpy()[mask], True))
        self.source_keyframe = self.source_keyframe[mask]

    def snapshot(self) -> dict:
        return {k: v.detach().numpy().copy() for k, v in self.parameters().items()}


def project_gaussian(mu: np.ndarray, r: float, pose: Pose,
                     K: CameraIntrinsics, gaussian_id: int = 0) -> SplatFragment:
    """Project one Gaussian to screen space; raises BehindCamera for z <= MIN_Z."""
    p = pose.transform(np.asarray(mu, float))
    x, y, z = p
    if z <= MIN_Z:
        raise BehindCamera(f"gaussian at camera depth {z:.4f}")
    mu2d = np.array([K.fx * x / z + K.cx, K.fy * y / z + K.cy])
    J = np.array([
        [K.fx / z, 0.0, -K.fx * x / z**2],
        [0.0, K.fy / z, -K.fy * y / z**2],
    ])
    sigma = r**2 * J @ J.T + COV_REG * np.eye(2)
    a, b, c = sigma[0, 0], sigma[0, 1], sigma[1, 1]
    eig_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b**2)
    rad = 3.0 * np.sqrt(eig_max)
    x0 = int(max(0, np.floor(mu2d[0] - rad)))
    y0 = int(max(0, np.floor(mu2d[1] - rad)))
    x1 = int(min(K.width, np.ceil(mu2d[0] + rad) + 1))
    y1 = int(min(K.height, np.ceil(mu2d[1] + rad) + 1))
    return SplatFragment(gaussian_id, mu2d, sigma, float(z), (x0, y0, x1, y1))


def _project_batch(mu: torch.Tensor, r: torch.Tensor, R: torch.Tensor,
                   t: torch.Tensor, K: CameraIntrinsics):
    cam = mu @ R.T + t
    z = cam[:, 2]
    x, y = cam[:, 0], cam[:, 1]
    u = K.fx * x / z + K.cx
    v = K.fy * y / z + K.cy
    r2 = r**2
    jx = K.fx / z
    jy = K.fy / z
    jxz = -K.fx * x / z**2
    jyz = -K.fy * y / z**2
    a = r2 * (jx**2 + jxz**2) + COV_REG
    b = r2 * (jxz * jyz)
    c = r2 * (jy**2 + jyz**2) + COV_REG
    return u, v, z, a, b, c


def rasterize(gmap: GaussianMap, pose_rt, K: CameraIntrinsics,
              want_feature: bool = True, want_visibility: bool = False) -> dict:
    """Tile-based front-to-back alpha compositing.

    pose_rt: either a Pose or a differentiable (R, t) tensor pair. Returns
    color (H,W,3), depth (H,W), accumulated opacity (H,W), optionally the
    feature image (H,W,E) and a per-Gaussian visibility mask (max alpha > 0.01).
    """
    if isinstance(pose_rt, Pose):
        R = engine.tensor(pose_rt.R)
        t = engine.tensor(pose_rt.t)
    else:
        R, t = pose_rt
    H, W = K.height, K.width
    E = gmap.feature_dim
    dtype = gmap.mu.dtype if len(gmap) else torch.float32
    if not isinstance(pose_rt, Pose):
        R, t = R.to(dtype), t.to(dtype)
    zero = torch.zeros((), dtype=dtype)
    out = {
        "color": torch.zeros(H, W, 3, dtype=dtype),
        "depth": torch.zeros(H, W, dtype=dtype),
        "alpha": torch.zeros(H, W, dtype=dtype),
    }
    if want_feature:
        out["feat"] = torch.zeros(H, W, E, dtype=dtype)
    vis = np.zeros(len(gmap), dtype=bool)
    if len(gmap) == 0:
        if want_visibility:
            out["visible"] = vis
        return out

    u, v, z, a, b, c = _project_batch(gmap.mu, gmap.r, R, t, K)
    det = a * c - b * b
    ia, ib, ic = c / det, -b / det, a / det

    zd = z.detach().numpy()
    ud = u.detach().numpy()
    vd = v.detach().numpy()
    eig = 0.5 * (a + c) + torch.sqrt(0.25 * (a - c) ** 2 + b * b + 1e-12)
    rad = (3.0 * torch.sqrt(eig)).detach().numpy()
    front = zd > MIN_Z
    x0 = np.floor(ud - rad)
    x1 = np.ceil(ud + rad) + 1
    y0 = np.floor(vd - rad)
    y1 = np.ceil(vd + rad) + 1
    on_img = front & (x1 > 0) & (x0 < W) & (y1 > 0) & (y0 < H)
    idx_all = np.flatnonzero(on_img)
    if idx_all.size == 0:
        if want_visibility:
            out["visible"] = vis
        return out

    opac = gmap.o
    col = gmap.c
    fed = gmap.fed

    n_ty = (H + TILE - 1) // TILE
    n_tx = (W + TILE - 1) // TILE
    color_img = out["color"]
    depth_img = out["depth"]
    alpha_img = out["alpha"]
    feat_img = out.get("feat")
    for ty in range(n_ty):
        py0, py1 = ty * TILE, min((ty + 1) * TILE, H)
        for tx in range(n_tx):
            px0, px1 = tx * TILE, min((tx + 1) * TILE, W)
            sel = idx_all[
                (x1[idx_all] > px0) & (x0[idx_all] < px1)
                & (y1[idx_all] > py0) & (y0[idx_all] < py1)
            ]
            if sel.size == 0:
                continue
            order = np.argsort(zd[sel], kind="stable")
            sel = sel[order]
            st = torch.as_tensor(sel)
            yy, xx = torch.meshgrid(
                torch.arange(py0, py1, dtype=dtype),
                torch.arange(px0, px1, dtype=dtype),
                indexing="ij",
            )
            pxs = xx.reshape(-1)
            pys = yy.reshape(-1)
            dx = pxs[None, :] - u[st][:, None]
            dy = pys[None, :] - v[st][:, None]
            power = -0.5 * (
                ia[st][:, None] * dx * dx
                + 2.0 * ib[st][:, None] * dx * dy
                + ic[st][:, None] * dy * dy
            )
            alpha = opac[st][:, None] * torch.exp(power)
            alpha = torch.where(power < ALPHA_CUTOFF_POWER, zero, alpha)
            alpha = torch.clamp(alpha, max=ALPHA_MAX)
            one_m = 1.0 - alpha
            t_prev = torch.cat(
                [torch.ones(1, alpha.shape[1], dtype=dtype),
                 torch.cumprod(one_m, dim=0)[:-1]],
                dim=0,
            )
            wgt = alpha * t_prev
            wgt = torch.where(t_prev < T_MIN, zero, wgt)
            shape = (py1 - py0, px1 - px0)
            color_img[py0:py1, px0:px1] = (
                wgt[:, :, None] * col[st][:, None, :]
            ).sum(0).reshape(*shape, 3)
            depth_img[py0:py1, px0:px1] = (wgt * z[st][:, None]).sum(0).reshape(shape)
            alpha_img[py0:py1, px0:px1] = wgt.sum(0).reshape(shape)
            if feat_img is not None:
                feat_img[py0:py1, px0:px1] = (
                    wgt[:, :, None] * fed[st][:, None, :]
                ).sum(0).reshape(*shape, E)
            if want_visibility:
                amax = alpha.detach().max(dim=1).values.numpy()
                vis[sel] |= amax > 0.01
    if want_visibility:
        out["visible"] = vis
    return out


def save_ply(path, gmap: GaussianMap) -> None:
    """Export the map as a binary little-endian PLY point cloud."""
    n = len(gmap)
    mu = gmap.mu.detach().numpy()
    r = gmap.r.detach().numpy()
    o = gmap.o.detach().numpy()
    c = gmap.c.detach().numpy()
    f = gmap.fed.detach().numpy()
    props = ["x", "y", "z", "radius", "opacity", "red_f", "green_f", "blue_f"]
    props += [f"feat_{i}" for i in range(gmap.feature_dim)]
    with open(path, "wb") as fh:
        head = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        head += [f"property float {p}" for p in props]
        head += ["end_header"]
        fh.write(("\n".join(head) + "\n").encode())
        data = np.concatenate(
            [mu, r[:, None], o[:, None], c, f], axis=1
        ).astype("<f4")
        fh.write(data.tobytes())
