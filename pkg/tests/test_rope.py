import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from foley_bridge.errors import ConfigError, ShapeError
from foley_bridge.rope import apply_rope, rope_phases, rotate_pairs


def naive_rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Reference: rotate each (2i, 2i+1) pair by pos * base**(-2i/d)."""
    n, d = x.shape
    out = np.empty_like(x)
    for r in range(n):
        for i in range(d // 2):
            theta = positions[r] * base ** (-2.0 * i / d)
            c, s = math.cos(theta), math.sin(theta)
            xe, xo = x[r, 2 * i], x[r, 2 * i + 1]
            out[r, 2 * i] = xe * c - xo * s
            out[r, 2 * i + 1] = xe * s + xo * c
    return out


def test_matches_pairwise_rotation_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 8))
    pos = np.array([0, 1, 2, 5, 9, 100, 1000])
    got = apply_rope(torch.tensor(x), torch.tensor(pos), base=10_000.0)
    want = naive_rope(x, pos, 10_000.0)
    assert np.allclose(got.numpy(), want, atol=1e-12)


def test_position_zero_is_identity():
    x = torch.randn(4, 6, dtype=torch.float64)
    out = apply_rope(x, torch.zeros(4, dtype=torch.long), base=50.0)
    assert torch.allclose(out, x, atol=0.0)


def test_norm_preserved():
    rng = np.random.default_rng(1)
    x = torch.tensor(rng.normal(size=(16, 12)))
    pos = torch.arange(16) * 7
    out = apply_rope(x, pos, base=10_000.0)
    assert torch.allclose(out.norm(dim=-1), x.norm(dim=-1), atol=1e-12)


def test_relative_position_property():
    """q.k after rotation depends only on the position difference."""
    rng = np.random.default_rng(2)
    q = torch.tensor(rng.normal(size=(1, 8)))
    k = torch.tensor(rng.normal(size=(1, 8)))
    base = 10_000.0

    def dot(pq, pk):
        qr = apply_rope(q, torch.tensor([pq]), base)
        kr = apply_rope(k, torch.tensor([pk]), base)
        return float(qr @ kr.T)

    # (5, 2) and (8, 5) share the difference 3
    assert abs(dot(5, 2) - dot(8, 5)) < 1e-10
    assert abs(dot(0, 0) - dot(11, 11)) < 1e-10
    assert abs(dot(5, 2) - dot(5, 3)) > 1e-6  # different offsets disagree


@settings(max_examples=30, deadline=None)
@given(shift=st.integers(min_value=0, max_value=512),
       pq=st.integers(min_value=0, max_value=512),
       pk=st.integers(min_value=0, max_value=512))
def test_joint_shift_invariance(shift, pq, pk):
    rng = np.random.default_rng(3)
    q = torch.tensor(rng.normal(size=(1, 8)))
    k = torch.tensor(rng.normal(size=(1, 8)))
    base = 10_000.0
    a = apply_rope(q, torch.tensor([pq]), base) @ apply_rope(k, torch.tensor([pk]), base).T
    b = apply_rope(q, torch.tensor([pq + shift]), base) @ \
        apply_rope(k, torch.tensor([pk + shift]), base).T
    assert abs(float(a) - float(b)) < 1e-10


def test_phases_shape_and_range():
    cos, sin = rope_phases(torch.arange(5), 8, 100.0, torch.float64)
    assert cos.shape == (5, 4) and sin.shape == (5, 4)
    assert torch.allclose(cos ** 2 + sin ** 2,
                          torch.ones(5, 4, dtype=torch.float64), atol=1e-12)


def test_odd_head_dim_rejected():
    with pytest.raises(ConfigError):
        rope_phases(torch.arange(3), 7, 100.0, torch.float64)


def test_apply_rope_shape_checks():
    with pytest.raises(ShapeError):
        apply_rope(torch.randn(3, 4, 5), torch.arange(3), 100.0)
    with pytest.raises(ShapeError):
        apply_rope(torch.randn(3, 4), torch.arange(2), 100.0)


def test_rotate_pairs_broadcasts_over_heads():
    x = torch.randn(2, 3, 6, 8, dtype=torch.float64)  # [b, heads, n, d_head]
    cos, sin = rope_phases(torch.arange(6), 8, 10.0, torch.float64)
    out = rotate_pairs(x, cos, sin)
    assert out.shape == x.shape
    flat = rotate_pairs(x[1, 2], cos, sin)
    assert torch.allclose(out[1, 2], flat, atol=0.0)
