"""Differentiable array primitives, the Adam optimizer, and checkpoint I/O.

Reverse-mode differentiation is delegated to torch's autograd tape; every
primitive here validates its contract and is gradient-checked against central
finite differences in the test suite. All math runs in float32 with float64
accumulation happening inside torch's reduction kernels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import BadMagic, NonFinite, NonScalarLoss, ShapeMismatch, TruncatedPayload

CHECKPOINT_MAGIC = b"DSK1"


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data), dtype=torch.float32)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def _check_finite(x: torch.Tensor, op: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFinite(f"{op} produced non-finite values")
    return x


# --- primitives ---------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def exp(a):
    return _check_finite(torch.exp(a), "exp")


def sigmoid(a):
    return torch.sigmoid(a)


def relu(a):
    return torch.relu(a)


def softmax_rows(a):
    """Row-wise softmax with max subtraction for stability."""
    if a.ndim != 2:
        raise ShapeMismatch(f"softmax_rows expects a matrix, got {tuple(a.shape)}")
    shifted = a - a.max(dim=1, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def concat_channels(arrays):
    """Concatenate along the last (channel) axis."""
    lead = tuple(arrays[0].shape[:-1])
    for x in arrays:
        if tuple(x.shape[:-1]) != lead:
            raise ShapeMismatch("concat_channels: leading dims differ")
    return torch.cat(list(arrays), dim=-1)


def bilinear_sample(grid: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a (C, H, W) grid at (N, 2) coordinates (x, y).

    Coordinates are in grid units: x in [0, W-1], y in [0, H-1], clamped to
    the valid range. Differentiable with respect to grid values and coords.
    """
    if grid.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeMismatch(
            f"bilinear_sample: grid {tuple(grid.shape)}, coords {tuple(coords.shape)}"
        )
    C, H, W = grid.shape
    x = coords[:, 0].clamp(0.0, W - 1.0)
    y = coords[:, 1].clamp(0.0, H - 1.0)
    # map to the normalized [-1, 1] coordinates of the fused sampler
    xn = 2.0 * x / (W - 1.0) - 1.0 if W > 1 else torch.zeros_like(x)
    yn = 2.0 * y / (H - 1.0) - 1.0 if H > 1 else torch.zeros_like(y)
    sample_grid = torch.stack([xn, yn], dim=-1).reshape(1, 1, -1, 2)
    out = torch.nn.functional.grid_sample(
        grid.unsqueeze(0), sample_grid,
        mode="bilinear", padding_mode="border", align_corners=True,
    )
    return out.reshape(C, -1).T


def sum_all(a):
    return a.sum()


def l1_loss(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1_loss: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def mse_loss(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse_loss: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


PRIMITIVES = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "exp": exp,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "concat_channels": concat_channels,
    "bilinear_sample": bilinear_sample,
    "sum": sum_all,
    "l1_loss": l1_loss,
    "mse_loss": mse_loss,
}


def backward(loss: torch.Tensor, params: dict) -> dict:
    """Gradient of a scalar loss with respect to each named leaf parameter."""
    if loss.ndim != 0:
        raise NonScalarLoss(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params.keys())
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], allow_unused=True, retain_graph=False
    )
    return {
        n: (g if g is not None else torch.zeros_like(params[n]))
        for n, g in zip(names, grads)
    }


# --- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr_scale: dict | None = None):
    """One Adam update in place; per-parameter learning-rate scaling optional."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"adam_step: grad/param shape differ for {name}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            lr = state.lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
            p -= lr * (m / bc1) / ((v / bc2).sqrt() + state.eps)
    return params


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, tensors: dict) -> None:
    """Write named tensors to the flat binary checkpoint format.

    Layout: magic "DSK1", then per tensor: name length (u32 LE), name bytes,
    rank (u32 LE), extents (u32 LE each), float32 LE data.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, t in tensors.items():
            arr = np.ascontiguousarray(
                t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t,
                dtype="<f4",
            )
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    """Read a "DSK1" checkpoint into a dict of float32 numpy arrays."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {data[:4]!r}")
    out = {}
    off = 4
    while off < len(data):
        if off + 4 > len(data):
            raise TruncatedPayload("truncated record header")
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        nbytes = 4 * count
        if off + nbytes > len(data):
            raise TruncatedPayload(f"truncated payload for tensor {name!r}")
        out[name] = (
            np.frombuffer(data, dtype="<f4", count=count, offset=off)
            .reshape(shape)
            .astype(np.float32)
        )
        off += nbytes
    return out


def set_deterministic(seed: int) -> None:
    """Single-threaded, seeded mode: bit-identical results across runs."""
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    np.random.seed(seed)
