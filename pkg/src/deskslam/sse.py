"""Scene structure encoder: fuses feature tokens, appearance, and geometry.

Token-grid features and per-patch depth statistics are lifted through two MLP
encoders and two cross-attention stages into enriched tokens

    f_ed = [refine(f_atten_a), f_atten_d, f_g]      (width 2*d_f + D)

with  f_atten_d = softmax(f_g f_a^T / sqrt(d_f)) f_d
and   f_atten_a = softmax(f_g f_atten_d^T / sqrt(D)) f_a.

The second stage mixes geometry tokens with the output of the first, so the
encoder requires d_f == D (the default configuration uses 16 for both).

Parameters are frozen after seeded Xavier-uniform init by default; a config
flag enables joint optimization with the mapping losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import engine
from .errors import ShapeMismatch
from .features import FeatureMap, depth_token_stats

DEPTH_STAT_CHANNELS = 4


def _xavier(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(np.float32)


@dataclass
class SSEParams:
    feature_dim: int  # D
    width: int  # d_f
    seed: int
    tensors: dict = field(default_factory=dict)
    trainable: bool = False

    @classmethod
    def init(cls, feature_dim: int, width: int, seed: int = 0,
             trainable: bool = False) -> "SSEParams":
        rng = np.random.default_rng(seed)
        d, h = feature_dim, width

        def mlp(prefix, n_in, n_hidden, n_out, t):
            t[f"{prefix}.w1"] = engine.tensor(_xavier(rng, n_in, n_hidden))
            t[f"{prefix}.b1"] = engine.tensor(np.zeros(n_hidden, np.float32))
            t[f"{prefix}.w2"] = engine.tensor(_xavier(rng, n_hidden, n_out))
            t[f"{prefix}.b2"] = engine.tensor(np.zeros(n_out, np.float32))

        t = {}
        mlp("fed", d, h, h, t)  # feature tokens -> appearance
        mlp("feg", DEPTH_STAT_CHANNELS, h, h, t)  # depth stats -> geometry
        mlp("fea", h, h, h, t)  # appearance refinement
        p = cls(feature_dim=d, width=h, seed=seed, tensors=t, trainable=trainable)
        p.set_trainable(trainable)
        return p

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        for v in self.tensors.values():
            v.requires_grad_(flag)

    @property
    def edino_dim(self) -> int:
        return 2 * self.width + self.feature_dim


@dataclass
class SSEOutput:
    f_d: torch.Tensor  # (N, D)
    f_ed: torch.Tensor  # (N, 2*d_f + D)
    grid_shape: tuple = (0, 0)


def _mlp2(params: dict, prefix: str, x: torch.Tensor) -> torch.Tensor:
    h = engine.relu(x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return h @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def encode_appearance(params: SSEParams, f_d: torch.Tensor) -> torch.Tensor:
    if f_d.shape[1] != params.feature_dim:
        raise ShapeMismatch(f"expected {params.feature_dim} channels, got {f_d.shape[1]}")
    return _mlp2(params.tensors, "fed", f_d)


def encode_geometry(params: SSEParams, depth_tokens: torch.Tensor) -> torch.Tensor:
    if depth_tokens.shape[1] != DEPTH_STAT_CHANNELS:
        raise ShapeMismatch(
            f"expected {DEPTH_STAT_CHANNELS} depth stats, got {depth_tokens.shape[1]}"
        )
    return _mlp2(params.tensors, "feg", depth_tokens)


def attention_dino(f_g: torch.Tensor, f_a: torch.Tensor, f_d: torch.Tensor) -> torch.Tensor:
    """Geometry/appearance-guided refinement of the raw feature tokens."""
    if f_g.shape != f_a.shape or f_g.shape[0] != f_d.shape[0]:
        raise ShapeMismatch("attention_dino: token counts or widths differ")
    scale = 1.0 / np.sqrt(f_a.shape[1])
    attn = engine.softmax_rows(f_g @ f_a.T * scale)
    return attn @ f_d


def attention_appearance(f_g: torch.Tensor, f_atten_d: torch.Tensor,
                         f_a: torch.Tensor) -> torch.Tensor:
    """Token-feature-guided enhancement of the appearance tokens."""
    if f_g.shape != f_a.shape or f_g.shape != f_atten_d.shape:
        raise ShapeMismatch("attention_appearance: token counts or widths differ")
    scale = 1.0 / np.sqrt(f_atten_d.shape[1])
    attn = engine.softmax_rows(f_g @ f_atten_d.T * scale)
    return attn @ f_a


def sse_forward(params: SSEParams, depth: np.ndarray, features: FeatureMap) -> SSEOutput:
    """Full encoder pass for one frame's token grid."""
    Ht, Wt = features.grid_shape
    f_d = engine.tensor(features.tokens.reshape(Ht * Wt, -1))
    stats = depth_token_stats(depth, features.patch_stride)
    if stats.shape[:2] != (Ht, Wt):
        raise ShapeMismatch("depth token grid does not match feature grid")
    d_tok = engine.tensor(stats.reshape(Ht * Wt, DEPTH_STAT_CHANNELS))

    f_a = encode_appearance(params, f_d)
    f_g = encode_geometry(params, d_tok)
    f_atten_d = attention_dino(f_g, f_a, f_d)
    f_atten_a = attention_appearance(f_g, f_atten_d, f_a)
    f_atten_a_ref = _mlp2(params.tensors, "fea", f_atten_a)
    f_ed = engine.concat_channels([f_atten_a_ref, f_atten_d, f_g])
    return SSEOutput(f_d=f_d, f_ed=f_ed, grid_shape=(Ht, Wt))


def edino_pixel_targets(out: SSEOutput, height: int, width: int):
    """Per-pixel (H, W, C) maps of f_d and f_ed via bilinear token upsampling."""
    from .features import upsample_to_pixels

    Ht, Wt = out.grid_shape
    f_d = out.f_d.detach().numpy().reshape(Ht, Wt, -1)
    f_ed = out.f_ed.detach().numpy().reshape(Ht, Wt, -1)
    return (
        upsample_to_pixels(f_d, height, width),
        upsample_to_pixels(f_ed, height, width),
    )
