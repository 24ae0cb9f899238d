"""Scene structure encoder: attention math, shapes, determinism, gradients."""

import numpy as np
import pytest
import torch

from deskslam import engine, sse
from deskslam.errors import ShapeMismatch
from deskslam.features import FeatureMap, depth_token_stats

from oracles import finite_diff, naive_attention, naive_softmax_rows, rel_err


def _feature_map(rng, ht=3, wt=4, dim=6, stride=4):
    tokens = rng.standard_normal((ht, wt, dim)).astype(np.float32)
    return FeatureMap(tokens=tokens, patch_stride=stride, frame_id=0)


def _depth(rng, ht=3, wt=4, stride=4):
    d = 1.0 + 0.3 * rng.random((ht * stride, wt * stride))
    return d.astype(np.float32)


def test_params_init_shapes_and_edino_dim():
    p = sse.SSEParams.init(feature_dim=6, width=5, seed=0)
    assert p.tensors["fed.w1"].shape == (6, 5)
    assert p.tensors["feg.w1"].shape == (sse.DEPTH_STAT_CHANNELS, 5)
    assert p.tensors["fea.w2"].shape == (5, 5)
    assert p.edino_dim == 2 * 5 + 6


def test_params_init_deterministic_bitexact():
    a = sse.SSEParams.init(feature_dim=8, width=4, seed=7)
    b = sse.SSEParams.init(feature_dim=8, width=4, seed=7)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k].detach().numpy(),
                              b.tensors[k].detach().numpy())
    c = sse.SSEParams.init(feature_dim=8, width=4, seed=8)
    assert not np.array_equal(a.tensors["fed.w1"].detach().numpy(),
                              c.tensors["fed.w1"].detach().numpy())


def test_set_trainable_toggles_grad_flags():
    p = sse.SSEParams.init(feature_dim=4, width=3, seed=0, trainable=True)
    assert all(v.requires_grad for v in p.tensors.values())
    p.set_trainable(False)
    assert not any(v.requires_grad for v in p.tensors.values())


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    n, h, d = 7, 5, 6
    f_g = torch.tensor(rng.standard_normal((n, h)).astype(np.float32))
    f_a = torch.tensor(rng.standard_normal((n, h)).astype(np.float32))
    scale = 1.0 / np.sqrt(h)
    attn = engine.softmax_rows(f_g @ f_a.T * scale).numpy()
    assert np.all(np.abs(attn.sum(axis=1) - 1.0) < 1e-6)
    ref = naive_softmax_rows((f_g.numpy() @ f_a.numpy().T) * scale)
    assert np.allclose(attn, ref, atol=1e-6)


def test_attention_dino_matches_naive():
    rng = np.random.default_rng(1)
    n, h, d = 6, 4, 5
    f_g = rng.standard_normal((n, h)).astype(np.float32)
    f_a = rng.standard_normal((n, h)).astype(np.float32)
    f_d = rng.standard_normal((n, d)).astype(np.float32)
    out = sse.attention_dino(torch.tensor(f_g), torch.tensor(f_a),
                             torch.tensor(f_d)).numpy()
    ref = naive_attention(f_g, f_a, f_d, 1.0 / np.sqrt(h))
    assert np.allclose(out, ref, atol=1e-5)


def test_attention_appearance_matches_naive():
    rng = np.random.default_rng(2)
    n, h = 6, 4
    f_g = rng.standard_normal((n, h)).astype(np.float32)
    f_a = rng.standard_normal((n, h)).astype(np.float32)
    f_ad = rng.standard_normal((n, h)).astype(np.float32)
    out = sse.attention_appearance(torch.tensor(f_g), torch.tensor(f_ad),
                                   torch.tensor(f_a)).numpy()
    ref = naive_attention(f_g, f_ad, f_a, 1.0 / np.sqrt(h))
    assert np.allclose(out, ref, atol=1e-5)


def test_attention_shape_errors():
    f = torch.zeros((4, 3))
    with pytest.raises(ShapeMismatch):
        sse.attention_dino(f, torch.zeros((4, 2)), torch.zeros((4, 5)))
    with pytest.raises(ShapeMismatch):
        sse.attention_dino(f, f, torch.zeros((3, 5)))
    with pytest.raises(ShapeMismatch):
        sse.attention_appearance(f, torch.zeros((4, 5)), f)


def test_zero_geometry_gives_mean_rows():
    # Zero geometry tokens -> uniform attention -> each output row is the
    # column mean of the value rows.
    rng = np.random.default_rng(3)
    n, h, d = 4, 3, 5  # n a power of two so 1/n is exact
    f_a = rng.standard_normal((n, h)).astype(np.float32)
    f_d = rng.standard_normal((n, d)).astype(np.float32)
    out = sse.attention_dino(torch.zeros((n, h)), torch.tensor(f_a),
                             torch.tensor(f_d)).numpy()
    uniform = np.full((n, n), 1.0 / n, dtype=np.float32) @ f_d
    assert np.array_equal(out, uniform)
    assert np.allclose(out, f_d.mean(axis=0, keepdims=True), atol=1e-6)


def test_zero_depth_stats_give_zero_geometry_encoding():
    p = sse.SSEParams.init(feature_dim=4, width=3, seed=0)
    f_g = sse.encode_geometry(p, torch.zeros((5, sse.DEPTH_STAT_CHANNELS)))
    assert np.array_equal(f_g.detach().numpy(), np.zeros((5, 3), np.float32))


def test_encoder_shape_errors():
    p = sse.SSEParams.init(feature_dim=4, width=3, seed=0)
    with pytest.raises(ShapeMismatch):
        sse.encode_appearance(p, torch.zeros((5, 3)))
    with pytest.raises(ShapeMismatch):
        sse.encode_geometry(p, torch.zeros((5, 3)))


def test_sse_forward_shapes_and_width():
    rng = np.random.default_rng(4)
    fm = _feature_map(rng, ht=3, wt=4, dim=5)
    depth = _depth(rng, ht=3, wt=4)
    p = sse.SSEParams.init(feature_dim=5, width=5, seed=1)
    out = sse.sse_forward(p, depth, fm)
    assert out.grid_shape == (3, 4)
    assert out.f_d.shape == (12, 5)
    assert out.f_ed.shape == (12, 2 * 5 + 5)
    assert out.f_ed.shape[1] == p.edino_dim


def test_sse_forward_deterministic_bitexact():
    rng = np.random.default_rng(5)
    fm = _feature_map(rng, dim=5)
    depth = _depth(rng)
    p1 = sse.SSEParams.init(feature_dim=5, width=5, seed=3)
    p2 = sse.SSEParams.init(feature_dim=5, width=5, seed=3)
    a = sse.sse_forward(p1, depth, fm)
    b = sse.sse_forward(p2, depth, fm)
    assert np.array_equal(a.f_ed.detach().numpy(), b.f_ed.detach().numpy())


def test_sse_forward_zero_geometry_blocks():
    # With an all-invalid depth map every patch has zero depth statistics,
    # so the first attention stage reduces to the mean of the raw tokens.
    rng = np.random.default_rng(6)
    fm = _feature_map(rng, ht=2, wt=2, dim=5)
    depth = np.zeros((8, 8), np.float32)
    stats = depth_token_stats(depth, fm.patch_stride)
    assert np.array_equal(stats, np.zeros_like(stats))
    p = sse.SSEParams.init(feature_dim=5, width=5, seed=2)
    out = sse.sse_forward(p, depth, fm)
    f_d = fm.tokens.reshape(4, 5)
    f_atten_d = out.f_ed.detach().numpy()[:, 5:10]
    uniform = np.full((4, 4), 0.25, dtype=np.float32) @ f_d
    assert np.allclose(f_atten_d, uniform, atol=1e-6)
    # geometry slice is exactly zero
    assert np.array_equal(out.f_ed.detach().numpy()[:, 10:15],
                          np.zeros((4, 5), np.float32))


def test_sse_forward_grid_mismatch():
    rng = np.random.default_rng(7)
    fm = _feature_map(rng, ht=3, wt=4, dim=5, stride=4)
    depth = _depth(rng, ht=2, wt=4, stride=4)
    p = sse.SSEParams.init(feature_dim=5, width=5, seed=0)
    with pytest.raises(ShapeMismatch):
        sse.sse_forward(p, depth, fm)


def test_sse_forward_parameter_gradients():
    # The encoder stages are composed with float64 parameter copies so the
    # finite-difference oracle is not dominated by float32 roundoff.
    rng = np.random.default_rng(8)
    fm = _feature_map(rng, ht=2, wt=2, dim=4)
    depth = _depth(rng, ht=2, wt=2)
    p32 = sse.SSEParams.init(feature_dim=4, width=4, seed=0)
    tensors = {k: v.detach().double().requires_grad_(True)
               for k, v in p32.tensors.items()}
    p = sse.SSEParams(feature_dim=4, width=4, seed=0, tensors=tensors)
    f_d = torch.tensor(fm.tokens.reshape(4, 4).astype(np.float64))
    stats = depth_token_stats(depth, fm.patch_stride)
    d_tok = torch.tensor(stats.reshape(4, sse.DEPTH_STAT_CHANNELS).astype(np.float64))

    def loss_fn():
        f_a = sse.encode_appearance(p, f_d)
        f_g = sse.encode_geometry(p, d_tok)
        f_atten_d = sse.attention_dino(f_g, f_a, f_d)
        f_atten_a = sse.attention_appearance(f_g, f_atten_d, f_a)
        f_ref = sse._mlp2(p.tensors, "fea", f_atten_a)
        f_ed = engine.concat_channels([f_ref, f_atten_d, f_g])
        return engine.sum_all(f_ed * f_ed)

    grads = engine.backward(loss_fn(), p.tensors)
    for name in ["fed.w1", "fed.b1", "feg.w1", "feg.b2", "fea.w2"]:
        t = p.tensors[name]
        arr = t.detach().numpy()

        def f(x, _t=t):
            with torch.no_grad():
                _t.copy_(torch.tensor(x))
            v = float(loss_fn().detach())
            with torch.no_grad():
                _t.copy_(torch.tensor(arr))
            return v

        num = finite_diff(f, arr.copy(), eps=1e-5)
        assert rel_err(grads[name], num) < 1e-3, name


def test_edino_pixel_targets_shapes():
    rng = np.random.default_rng(9)
    fm = _feature_map(rng, ht=2, wt=3, dim=4, stride=4)
    depth = _depth(rng, ht=2, wt=3, stride=4)
    p = sse.SSEParams.init(feature_dim=4, width=4, seed=0)
    out = sse.sse_forward(p, depth, fm)
    fd_px, fed_px = sse.edino_pixel_targets(out, 8, 12)
    assert fd_px.shape == (8, 12, 4)
    assert fed_px.shape == (8, 12, p.edino_dim)
    assert np.all(np.isfinite(fd_px)) and np.all(np.isfinite(fed_px))
