"""Rotary position embeddings applied per modality.

Coordinates are rotated in adjacent pairs (x_{2i}, x_{2i+1}) by the angle
`position * base**(-2i/d_head)`, so dot products between rotated queries
and keys depend only on the position difference. Audio and video streams
call this independently with their own integer positions; the phase base
is a single shared config knob.
"""

from __future__ import annotations

import torch

from .errors import ConfigError, ShapeError


def rope_phases(positions: torch.Tensor, d_head: int, base: float, dtype: torch.dtype):
    """Return (cos, sin) tables of shape [n, d_head/2] for integer positions."""
    if d_head % 2 != 0:
        raise ConfigError(f"rope head dim must be even, got {d_head}")
    half = d_head // 2
    exponents = -2.0 * torch.arange(half, dtype=torch.float64) / float(d_head)
    inv_freq = torch.pow(torch.tensor(float(base), dtype=torch.float64), exponents)
    angles = positions.to(torch.float64)[:, None] * inv_freq[None, :]
    angles = angles.to(dtype)
    return torch.cos(angles), torch.sin(angles)


def rotate_pairs(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate the trailing dim of x (= 2 * cos.shape[-1]) pairwise. Broadcasts
    cos/sin [n, half] against x [..., n, 2*half]."""
    even = x[..., 0::2]
    odd = x[..., 1::2]
    rot_even = even * cos - odd * sin
    rot_odd = even * sin + odd * cos
    return torch.stack((rot_even, rot_odd), dim=-1).flatten(-2)


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate a [n, d_head] matrix by per-row positions.

    Position 0 leaves rows unchanged; every pair keeps its Euclidean norm.
    """
    if x.ndim != 2:
        raise ShapeError(f"apply_rope expects a [n, d_head] matrix, got shape {tuple(x.shape)}")
    n, d_head = x.shape
    positions = torch.as_tensor(positions)
    if positions.ndim != 1 or positions.shape[0] != n:
        raise ShapeError(
            f"positions must be a length-{n} vector, got shape {tuple(positions.shape)}"
        )
    cos, sin = rope_phases(positions, d_head, base, x.dtype)
    return rotate_pairs(x, cos, sin)
