import math

import numpy as np
import pytest
import torch

from foley_bridge.backbone import LatentSequence, encode_prompt, init_backbone
from foley_bridge.bridge import (
    MASK_SLOTS,
    AdapterMLP,
    BridgeSublayer,
    PoolingSpec,
    RawVideoTokens,
    VideoBridge,
    VideoTokens,
    adapter_mlp,
    bridged_forward,
    init_bridge,
    mask_modules,
    pool_video,
    trainable_mask,
    trainable_parameters,
    video_cross_attention,
)
from foley_bridge.errors import NumericError, PoolingError, ShapeError


# ---------------------------------------------------------------------------
# raw tokens and pooling


def _raw(n_frames=32, n_patches=64, d_video=6, fps=16.0, stride=2, seed=0):
    rng = np.random.default_rng(seed)
    return RawVideoTokens(
        tokens=torch.tensor(rng.normal(size=(n_frames, n_patches, d_video)),
                            dtype=torch.float32),
        fps=fps, stride=stride)


def test_raw_video_properties():
    raw = _raw()
    assert raw.n_frames_eff == 32
    assert raw.eff_fps == 8.0
    assert raw.grid_side == 8


def test_raw_video_rejects_non_square_patches():
    with pytest.raises(PoolingError):
        _raw(n_patches=60)


def test_raw_video_rejects_bad_rates():
    with pytest.raises(PoolingError):
        _raw(fps=0.0)
    with pytest.raises(PoolingError):
        _raw(stride=0)


def test_raw_video_rejects_nonfinite():
    bad = torch.zeros(2, 4, 3)
    bad[0, 0, 0] = float("inf")
    with pytest.raises(NumericError):
        RawVideoTokens(tokens=bad)


def test_pooling_spec_multiple_invariant():
    PoolingSpec(mode="frame", max_duration_s=12.0, segment_s=4.0).validate()
    with pytest.raises(PoolingError):
        PoolingSpec(max_duration_s=10.0, segment_s=4.0).validate()
    with pytest.raises(PoolingError):
        PoolingSpec(mode="grid4").validate()
    assert PoolingSpec(mode="frame").cells is None
    assert PoolingSpec(mode="grid8").cells == 8
    assert PoolingSpec(mode="grid16").cells == 16


def test_frame_pooling_token_budget_and_oracle():
    raw = _raw()  # 4 s at eff 8 fps
    out = pool_video(raw, PoolingSpec(mode="frame"))
    assert out.s_v == 32  # one token per effective frame
    assert out.positions.tolist() == list(range(32))
    want = raw.tokens.to(torch.float64).mean(dim=1)
    assert np.abs(out.tokens.to(torch.float64).numpy() - want.numpy()).max() < 1e-6
    assert out.eff_fps == 8.0


def test_grid8_token_budget():
    raw = _raw()  # 8x8 patch grid
    out = pool_video(raw, PoolingSpec(mode="grid8"))
    assert out.s_v == 32 * 64 == 2048  # 64 cells per frame on a 4 s clip
    # block size 1: cells are the patches themselves, row-major
    assert torch.equal(out.tokens, raw.tokens.reshape(2048, 6))
    assert torch.equal(out.positions,
                       torch.repeat_interleave(torch.arange(32), 64))


def test_grid_pooling_cell_mean_oracle():
    raw = _raw(n_frames=3, n_patches=256)  # 16x16 grid, block 2 for grid8
    out = pool_video(raw, PoolingSpec(mode="grid8"))
    assert out.s_v == 3 * 64
    x = raw.tokens.to(torch.float64).numpy().reshape(3, 16, 16, 6)
    for f in range(3):
        for cy in range(8):
            for cx in range(8):
                cell = x[f, 2 * cy : 2 * cy + 2, 2 * cx : 2 * cx + 2].mean(axis=(0, 1))
                got = out.tokens[f * 64 + cy * 8 + cx].to(torch.float64).numpy()
                assert np.abs(got - cell).max() < 1e-6


def test_grid16_needs_compatible_grid():
    with pytest.raises(PoolingError):
        pool_video(_raw(), PoolingSpec(mode="grid16"))  # 8x8 grid, 16 cells


def test_pooling_truncates_at_max_duration():
    raw = _raw(n_frames=160)  # 20 s at eff 8 fps
    out = pool_video(raw, PoolingSpec(mode="frame"))
    assert out.s_v == 96  # 12 s cap
    assert int(out.positions.max()) == 95


def test_pooling_rejects_empty():
    raw = _raw(n_frames=1)
    raw.tokens = raw.tokens[:0]
    with pytest.raises(PoolingError):
        pool_video(raw, PoolingSpec())


def test_video_tokens_absent_and_order_check():
    vt = VideoTokens.absent(6)
    assert not vt.present and vt.s_v == 0
    with pytest.raises(ShapeError):
        VideoTokens(tokens=torch.zeros(3, 6), positions=torch.tensor([2, 1, 0]),
                    eff_fps=8.0)
    # repeated positions (grid cells of one frame) are allowed
    VideoTokens(tokens=torch.zeros(3, 6), positions=torch.tensor([0, 0, 1]), eff_fps=8.0)


# ---------------------------------------------------------------------------
# adapter


def exact_gelu(x: np.ndarray) -> np.ndarray:
    return np.array([0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))) for v in x.ravel()]
                    ).reshape(x.shape)


def test_adapter_matches_pertoken_oracle():
    torch.manual_seed(0)
    ad = AdapterMLP(6).double()
    x = torch.randn(5, 6, dtype=torch.float64)
    got = ad(x).detach().numpy()
    w1 = ad.fc1.weight.detach().numpy()
    b1 = ad.fc1.bias.detach().numpy()
    w2 = ad.fc2.weight.detach().numpy()
    b2 = ad.fc2.bias.detach().numpy()
    for i in range(5):
        xi = x[i].numpy()
        want = xi + w2 @ exact_gelu(w1 @ xi + b1) + b2
        assert np.abs(got[i] - want).max() < 1e-12


def test_adapter_square_shape_preserved():
    ad = AdapterMLP(24)
    out = ad(torch.randn(32, 24))
    assert out.shape == (32, 24)
    assert ad.fc1.weight.shape == (24, 24) and ad.fc2.weight.shape == (24, 24)


def test_adapter_zeroed_second_layer_is_identity():
    ad = AdapterMLP(6)
    with torch.no_grad():
        ad.fc2.weight.zero_()
        ad.fc2.bias.zero_()
    x = torch.randn(7, 6)
    assert torch.equal(ad(x), x)


def _vt(n=6, d=6, seed=0, fps=8.0):
    rng = np.random.default_rng(seed)
    return VideoTokens(tokens=torch.tensor(rng.normal(size=(n, d)), dtype=torch.float32),
                       positions=torch.arange(n), eff_fps=fps)


def test_adapter_op_validates_and_passes_empty():
    ad = AdapterMLP(6)
    with pytest.raises(ShapeError):
        adapter_mlp(torch.zeros(3, 6), ad)
    with pytest.raises(ShapeError):
        adapter_mlp(_vt(d=5), ad)
    out = adapter_mlp(VideoTokens.absent(6), ad)
    assert out.s_v == 0 and not out.present


def test_adapter_op_detaches_input():
    ad = AdapterMLP(6)
    v = _vt()
    v.tokens.requires_grad_(True)
    out = adapter_mlp(v, ad)
    out.tokens.sum().backward()
    assert v.tokens.grad is None
    assert ad.fc1.weight.grad is not None


# ---------------------------------------------------------------------------
# cross-attention sublayer


def naive_rope_rows(x, positions, base):
    out = np.array(x, copy=True)
    n, d = x.shape
    for r in range(n):
        for i in range(d // 2):
            theta = float(positions[r]) * base ** (-2.0 * i / d)
            c, s = math.cos(theta), math.sin(theta)
            xe, xo = x[r, 2 * i], x[r, 2 * i + 1]
            out[r, 2 * i] = xe * c - xo * s
            out[r, 2 * i + 1] = xe * s + xo * c
    return out


def naive_sublayer(sub: BridgeSublayer, x: np.ndarray, v: np.ndarray,
                   x_pos, v_pos) -> np.ndarray:
    """Dense fp64 reimplementation: pre-norm, rotary Q/K, softmax, residual."""
    w = {k: t.detach().numpy().astype(np.float64) for k, t in sub.state_dict().items()}
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    xn = (x - mu) / np.sqrt(var + sub.audio_norm.eps)
    xn = xn * w["audio_norm.weight"] + w["audio_norm.bias"]
    attn = sub.attn
    d_model = attn.d_model
    q = xn @ w["attn.q_proj.weight"].T + w["attn.q_proj.bias"]
    kv = v @ w["attn.kv_proj.weight"].T + w["attn.kv_proj.bias"]
    k, val = kv[:, :d_model], kv[:, d_model:]
    dh = attn.d_head
    heads = []
    for hh in range(attn.n_heads):
        qh = naive_rope_rows(q[:, hh * dh : (hh + 1) * dh], x_pos, attn.rope_base)
        kh = naive_rope_rows(k[:, hh * dh : (hh + 1) * dh], v_pos, attn.rope_base)
        vh = val[:, hh * dh : (hh + 1) * dh]
        logits = qh @ kh.T / math.sqrt(dh)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        heads.append(probs @ vh)
    concat = np.concatenate(heads, axis=1)
    out = concat @ w["attn.out_proj.weight"].T + w["attn.out_proj.bias"]
    return x + out


def test_cross_attention_matches_dense_oracle(small_config):
    bridge = init_bridge(small_config, d_video=6, seed=5, zero_init=False)
    sub = bridge.sublayers[0].double()
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 16))
    v = rng.normal(size=(6, 6))
    x_pos = np.arange(4)
    v_pos = np.array([0, 0, 1, 1, 2, 2])
    got = video_cross_attention(
        LatentSequence(tokens=torch.tensor(x), positions=torch.tensor(x_pos)),
        VideoTokens(tokens=torch.tensor(v), positions=torch.tensor(v_pos), eff_fps=8.0),
        sub,
    )
    want = naive_sublayer(sub, x, v, x_pos, v_pos)
    assert np.abs(got.tokens.detach().numpy() - want).max() < 1e-12


def test_zero_out_proj_is_bit_exact_identity(small_config):
    bridge = init_bridge(small_config, d_video=6, seed=0)  # zero_init default
    x = LatentSequence(tokens=torch.randn(8, 16))
    out = video_cross_attention(x, _vt(), bridge.sublayers[0])
    assert torch.equal(out.tokens, x.tokens)


def test_absent_video_is_exact_skip(small_config):
    bridge = init_bridge(small_config, d_video=6, seed=0, zero_init=False)
    x = LatentSequence(tokens=torch.randn(8, 16))
    out = video_cross_attention(x, VideoTokens.absent(6), bridge.sublayers[0])
    assert torch.equal(out.tokens, x.tokens)


def test_cross_attention_joint_shift_invariance(small_config):
    bridge = init_bridge(small_config, d_video=6, seed=2, zero_init=False)
    sub = bridge.sublayers[0].double()
    x = torch.randn(5, 16, dtype=torch.float64)
    v = torch.randn(4, 6, dtype=torch.float64)
    xp = torch.arange(5)
    vp = torch.arange(4) * 2

    def run(x_pos, v_pos):
        return video_cross_attention(
            LatentSequence(tokens=x, positions=x_pos),
            VideoTokens(tokens=v, positions=v_pos, eff_fps=8.0), sub).tokens

    base = run(xp, vp)
    shifted = run(xp + 11, vp + 11)
    video_only = run(xp, vp + 11)
    assert (base - shifted).abs().max() < 1e-10
    assert (base - video_only).abs().max() > 1e-6


def test_present_mask_gates_rows(small_config):
    bridge = init_bridge(small_config, d_video=6, seed=3, zero_init=False)
    sub = bridge.sublayers[0]
    h = torch.randn(2, 5, 16)
    v = torch.randn(2, 4, 6)
    mask = torch.tensor([1.0, 0.0])
    out = sub(h, v, torch.arange(5), torch.arange(4), present_mask=mask)
    assert not torch.allclose(out[0], h[0])
    assert torch.equal(out[1], h[1])  # masked row passes through exactly


# ---------------------------------------------------------------------------
# bridge assembly and the trainable surface


def test_adapt_all_detaches(small_config):
    bridge = init_bridge(small_config, d_video=6, seed=0)
    v = torch.randn(2, 4, 6, requires_grad=True)
    adapted = bridge.adapt_all(v)
    assert len(adapted) == small_config.n_blocks
    adapted[0].sum().backward()
    assert v.grad is None


def test_trainable_mask_names(small_config, small_backbone):
    bridge = init_bridge(small_config, d_video=6)
    mask = trainable_mask(small_backbone, bridge)
    assert len(mask) == small_config.n_blocks * len(MASK_SLOTS)
    assert mask == {f"block{i}.{slot}" for i in range(2) for slot in
                    ("mlp_w1", "mlp_w2", "W_q", "W_kv", "W_o", "norm")}
    modules = mask_modules(bridge)
    assert set(modules) == mask
    assert modules["block0.W_kv"] is bridge.sublayers[0].attn.kv_proj


def test_trainable_mask_rejects_aliasing(small_config):
    backbone = init_backbone(small_config, seed=0)
    bridge = init_bridge(small_config, d_video=6)
    bridge.sublayers[0].audio_norm.weight = backbone.final_norm.weight
    with pytest.raises(ShapeError):
        trainable_mask(backbone, bridge)
    with pytest.raises(ShapeError):
        trainable_parameters(bridge, backbone)


def test_trainable_parameters_cover_bridge(small_config, small_backbone):
    bridge = init_bridge(small_config, d_video=6)
    params = trainable_parameters(bridge, small_backbone)
    assert set(params) == {n for n, _ in bridge.named_parameters()}
    # 6 tensor groups per block, each a (weight, bias) pair
    assert len(params) == small_config.n_blocks * len(MASK_SLOTS) * 2
    n_bridge = sum(p.numel() for p in params.values())
    n_backbone = sum(p.numel() for p in small_backbone.parameters())
    assert n_bridge / n_backbone < 0.5


def test_init_bridge_deterministic(small_config):
    a = init_bridge(small_config, d_video=6, seed=9)
    b = init_bridge(small_config, d_video=6, seed=9)
    c = init_bridge(small_config, d_video=6, seed=10)
    for (n, pa), (_, pb), (_, pc) in zip(a.named_parameters(), b.named_parameters(),
                                         c.named_parameters()):
        assert torch.equal(pa, pb), n
    assert any(not torch.equal(pa, pc) for (_, pa), (_, pc) in
               zip(a.named_parameters(), c.named_parameters()))


def test_init_bridge_zero_init_gates(small_config):
    zeroed = init_bridge(small_config, d_video=6, seed=0)
    free = init_bridge(small_config, d_video=6, seed=0, zero_init=False)
    for sub in zeroed.sublayers:
        assert torch.equal(sub.attn.out_proj.weight,
                           torch.zeros_like(sub.attn.out_proj.weight))
    assert any(sub.attn.out_proj.weight.abs().sum() > 0 for sub in free.sublayers)


# ---------------------------------------------------------------------------
# end-to-end transparency


def test_zero_init_bridge_is_transparent(small_config, small_backbone):
    bridge = init_bridge(small_config, d_video=6, seed=0)
    x = LatentSequence(tokens=torch.randn(10, 16))
    text = encode_prompt("thud", 8)
    video = _vt(n=8, d=6)
    with torch.no_grad():
        plain = bridged_forward(x, 0.3, text, None, small_backbone, None)
        hooked = bridged_forward(x, 0.3, text, video, small_backbone, bridge)
    diff = (plain.tokens - hooked.tokens).abs().max()
    assert float(diff) < 1e-6
    assert torch.equal(plain.tokens, hooked.tokens)  # exact, not just close


def test_trained_gate_breaks_transparency(small_config, small_backbone):
    bridge = init_bridge(small_config, d_video=6, seed=0, zero_init=False)
    x = LatentSequence(tokens=torch.randn(10, 16))
    text = encode_prompt("thud", 8)
    video = _vt(n=8, d=6)
    with torch.no_grad():
        plain = bridged_forward(x, 0.3, text, None, small_backbone, None)
        hooked = bridged_forward(x, 0.3, text, video, small_backbone, bridge)
    assert not torch.allclose(plain.tokens, hooked.tokens)


def test_bridged_forward_trace(small_config, small_backbone):
    bridge = init_bridge(small_config, d_video=6, seed=0)
    x = LatentSequence(tokens=torch.randn(4, 16))
    trace = []
    bridged_forward(x, 0.5, encode_prompt("tick", 8), _vt(n=4, d=6),
                    small_backbone, bridge, trace=trace)
    assert trace == [(0, "sa"), (0, "tx_ca"), (0, "vid_ca"), (0, "ffn"),
                     (1, "sa"), (1, "tx_ca"), (1, "vid_ca"), (1, "ffn")]
