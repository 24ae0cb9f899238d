"""Rigid-body transforms, pinhole projection, and SE(3) tangent machinery.

Poses are camera-from-world (T_CW): p_cam = R @ p_world + t. Quaternions are
stored scalar-last (x, y, z, w), matching the TUM trajectory convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import BehindCamera, NonPositiveDepth, TooFewPairs


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")


@dataclass(frozen=True)
class Pose:
    """Camera-from-world rigid transform: quaternion (x,y,z,w) + translation."""

    q: np.ndarray  # (4,), scalar-last, unit norm
    t: np.ndarray  # (3,), meters

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0:
            raise ValueError("invalid quaternion")
        object.__setattr__(self, "q", q / n)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).copy())

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose(Rotation.from_matrix(T[:3, :3]).as_quat(), T[:3, 3])

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(Rotation.from_matrix(R).as_quat(), t)

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.q).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_rt(R.T, -R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply `other` first, then `self`."""
        R1, R2 = self.R, other.R
        return Pose.from_rt(R1 @ R2, R1 @ other.t + self.t)

    def transform(self, p_world: np.ndarray) -> np.ndarray:
        p = np.asarray(p_world, dtype=np.float64)
        return p @ self.R.T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def optical_axis(self) -> np.ndarray:
        """Viewing direction (camera +z) expressed in world coordinates."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])


def hat(w: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    W = hat(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def se3_exp(twist: np.ndarray) -> Pose:
    """Exponential map of a twist (w_x, w_y, w_z, v_x, v_y, v_z) -> Pose."""
    twist = np.asarray(twist, dtype=np.float64)
    w, v = twist[:3], twist[3:]
    theta = np.linalg.norm(w)
    W = hat(w)
    R = so3_exp(w)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * W + W @ W / 6.0
    else:
        V = (
            np.eye(3)
            + (1.0 - np.cos(theta)) / theta**2 * W
            + (theta - np.sin(theta)) / theta**3 * W @ W
        )
    return Pose.from_rt(R, V @ v)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of se3_exp (rotation angle < pi)."""
    rotvec = Rotation.from_quat(pose.q).as_rotvec()
    theta = np.linalg.norm(rotvec)
    W = hat(rotvec)
    if theta < 1e-8:
        Vinv = np.eye(3) - 0.5 * W + W @ W / 12.0
    else:
        half = 0.5 * theta
        Vinv = (
            np.eye(3)
            - 0.5 * W
            + (1.0 - half * np.cos(half) / np.sin(half)) / theta**2 * W @ W
        )
    return np.concatenate([rotvec, Vinv @ pose.t])


def project(pose: Pose, K: CameraIntrinsics, p_world: np.ndarray):
    """Pinhole projection; returns (pixel (2,), depth z)."""
    p = pose.transform(p_world)
    z = p[2]
    if z <= 0:
        raise BehindCamera(f"point has non-positive camera depth z={z:.4f}")
    return np.array([K.fx * p[0] / z + K.cx, K.fy * p[1] / z + K.cy]), float(z)


def backproject(K: CameraIntrinsics, pixel: np.ndarray, depth: float) -> np.ndarray:
    """Camera-frame 3D point of a pixel at the given metric depth."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = pixel[0], pixel[1]
    return np.array(
        [(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth]
    )


def backproject_grid(K: CameraIntrinsics, depth: np.ndarray) -> np.ndarray:
    """Backproject a full depth image; invalid (<=0) pixels yield zeros."""
    v, u = np.mgrid[0 : K.height, 0 : K.width]
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)


def motion_metrics(a: Pose, b: Pose):
    """Optical-center distance (m) and parallax angle (deg) between poses."""
    d = float(np.linalg.norm(a.center() - b.center()))
    cosang = float(np.clip(np.dot(a.optical_axis(), b.optical_axis()), -1.0, 1.0))
    return d, float(np.degrees(np.arccos(cosang)))


# --- differentiable pose perturbation (torch) -------------------------------

def se3_exp_torch(twist: torch.Tensor):
    """Differentiable exponential map; returns (R (3,3), t (3,)).

    Small-angle branch uses the Taylor series so gradients stay finite at 0.
    """
    w, v = twist[:3], twist[3:]
    theta2 = (w * w).sum()
    theta = torch.sqrt(theta2 + 1e-30)
    W = twist.new_zeros((3, 3))
    W = torch.stack(
        [
            torch.stack([twist.new_zeros(()), -w[2], w[1]]),
            torch.stack([w[2], twist.new_zeros(()), -w[0]]),
            torch.stack([-w[1], w[0], twist.new_zeros(())]),
        ]
    )
    eye = torch.eye(3, dtype=twist.dtype, device=twist.device)
    small = theta < 1e-4
    if small:
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
        C = 1.0 / 6.0 - theta2 / 120.0
    else:
        A = torch.sin(theta) / theta
        B = (1.0 - torch.cos(theta)) / theta2
        C = (theta - torch.sin(theta)) / (theta2 * theta)
    WW = W @ W
    R = eye + A * W + B * WW
    V = eye + B * W + C * WW
    return R, V @ v


def apply_twist_torch(twist: torch.Tensor, pose: Pose):
    """Left-perturbed pose exp(twist) ∘ T as differentiable (R, t) tensors."""
    dR, dt = se3_exp_torch(twist)
    R0 = torch.as_tensor(pose.R, dtype=twist.dtype)
    t0 = torch.as_tensor(pose.t, dtype=twist.dtype)
    return dR @ R0, dR @ t0 + dt


def pose_from_twist(twist: np.ndarray, pose: Pose) -> Pose:
    return se3_exp(twist).compose(pose)


# --- TUM trajectory serialization --------------------------------------------

def write_tum_trajectory(path, stamped_poses) -> None:
    """Write (timestamp, Pose) pairs as world-from-camera TUM lines."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in stamped_poses:
            wc = pose.inverse()
            f.write(
                "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n"
                % (ts, *wc.t, *wc.q)
            )


def read_tum_trajectory(path):
    """Read a TUM trajectory file into (timestamp, Pose) pairs (poses T_CW)."""
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) < 8:
                raise TooFewPairs(f"bad trajectory line: {line!r}")
            ts, tx, ty, tz, qx, qy, qz, qw = vals[:8]
            wc = Pose(np.array([qx, qy, qz, qw]), np.array([tx, ty, tz]))
            out.append((ts, wc.inverse()))
    return out
