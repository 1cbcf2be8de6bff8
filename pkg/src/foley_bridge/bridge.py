"""Trainable video conditioning bridge.

Pools raw per-frame patch features into a token sequence, then attends to
it from the audio latent stream through one extra cross-attention sublayer
per backbone block. All trainable state lives here: per-block video MLP
adapters, query/key-value/output projections, and the audio-side norms.
Output projections start at zero so an untrained bridge is an exact no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, LatentSequence, MultiheadAttention, TextTokens
from .errors import NumericError, PoolingError, ShapeError
from .rng import RngStream

POOL_MODES = ("frame", "grid8", "grid16")


# ---------------------------------------------------------------------------
# video token types and pooling


@dataclass
class RawVideoTokens:
    """Encoder output: per-effective-frame patch features.

    `tokens` is [n_frames_eff, n_patches, d_video]; the encoder has already
    collapsed `stride` source frames into each effective frame, so the
    effective rate is fps / stride.
    """

    tokens: torch.Tensor
    fps: float = 16.0
    stride: int = 2

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens)
        if self.tokens.ndim != 3:
            raise ShapeError(
                f"raw video must be [n_frames_eff, n_patches, d_video], got {tuple(self.tokens.shape)}"
            )
        side = math.isqrt(self.tokens.shape[1])
        if side * side != self.tokens.shape[1]:
            raise PoolingError(f"patch count {self.tokens.shape[1]} is not a square grid")
        if self.fps <= 0:
            raise PoolingError(f"fps must be positive, got {self.fps}")
        if self.stride < 1:
            raise PoolingError(f"stride must be >= 1, got {self.stride}")
        if not bool(torch.isfinite(self.tokens).all()):
            raise NumericError("raw video features contain non-finite entries")

    @property
    def n_frames_eff(self) -> int:
        return self.tokens.shape[0]

    @property
    def eff_fps(self) -> float:
        return self.fps / self.stride

    @property
    def grid_side(self) -> int:
        return math.isqrt(self.tokens.shape[1])


@dataclass(frozen=True)
class PoolingSpec:
    mode: str = "frame"
    max_duration_s: float = 12.0
    segment_s: float = 4.0

    def validate(self) -> "PoolingSpec":
        if self.mode not in POOL_MODES:
            raise PoolingError(f"unknown pooling mode {self.mode!r}, expected one of {POOL_MODES}")
        if self.segment_s <= 0:
            raise PoolingError(f"segment_s must be positive, got {self.segment_s}")
        if self.max_duration_s <= 0:
            raise PoolingError(f"max_duration_s must be positive, got {self.max_duration_s}")
        ratio = self.max_duration_s / self.segment_s
        if abs(ratio - round(ratio)) > 1e-9:
            raise PoolingError(
                f"max_duration_s ({self.max_duration_s}) must be a multiple of segment_s ({self.segment_s})"
            )
        return self

    @property
    def cells(self) -> int | None:
        """Spatial cells per side kept per effective frame; None pools to one token."""
        return {"frame": None, "grid8": 8, "grid16": 16}[self.mode]


@dataclass
class VideoTokens:
    """Pooled video tokens with effective-frame positions."""

    tokens: torch.Tensor
    positions: torch.Tensor
    eff_fps: float
    present: bool = True

    def __post_init__(self):
        self.tokens = torch.as_tensor(self.tokens)
        self.positions = torch.as_tensor(self.positions, dtype=torch.long)
        if self.tokens.ndim != 2:
            raise ShapeError(f"video tokens must be [s_v, d_video], got {tuple(self.tokens.shape)}")
        if self.positions.shape != (self.tokens.shape[0],):
            raise ShapeError("video positions must match token count")
        if self.tokens.shape[0] > 1 and bool((self.positions[1:] < self.positions[:-1]).any()):
            raise ShapeError("video positions must be nondecreasing")
        if not bool(torch.isfinite(self.tokens).all()):
            raise NumericError("video tokens contain non-finite entries")

    @property
    def s_v(self) -> int:
        return self.tokens.shape[0]

    @classmethod
    def absent(cls, d_video: int, dtype: torch.dtype = torch.float32) -> "VideoTokens":
        return cls(tokens=torch.zeros(0, d_video, dtype=dtype),
                   positions=torch.zeros(0, dtype=torch.long),
                   eff_fps=0.0, present=False)


def pool_video(raw: RawVideoTokens, spec: PoolingSpec) -> VideoTokens:
    """Spatial pooling of per-effective-frame patch features.

    "frame" averages all patches to one token per effective frame, "gridN"
    averages the patch grid into N x N cells (N^2 tokens per frame,
    row-major). Frames past max_duration_s are dropped, never an error.
    Positions are effective-frame indices, repeated per cell.
    """
    spec.validate()
    eff = raw.tokens
    if eff.shape[0] < 1:
        raise PoolingError("cannot pool empty video")

    max_eff = int(round(spec.max_duration_s * raw.eff_fps))
    if eff.shape[0] > max_eff:
        eff = eff[:max_eff]
    n_eff = eff.shape[0]

    cells = spec.cells
    if cells is None:
        tokens = eff.mean(dim=1)
        positions = torch.arange(n_eff)
        return VideoTokens(tokens=tokens, positions=positions, eff_fps=raw.eff_fps)

    side = raw.grid_side
    if cells > side or side % cells != 0:
        raise PoolingError(
            f"cannot pool {side}x{side} patch grid into {cells}x{cells} cells"
        )
    block = side // cells
    d_video = eff.shape[-1]
    grid = eff.view(n_eff, side, side, d_video)
    grid = grid.view(n_eff, cells, block, cells, block, d_video)
    cell_feats = grid.mean(dim=(2, 4))  # [n_eff, cells, cells, d_video]
    tokens = cell_feats.reshape(n_eff * cells * cells, d_video)
    positions = torch.repeat_interleave(torch.arange(n_eff), cells * cells)
    return VideoTokens(tokens=tokens, positions=positions, eff_fps=raw.eff_fps)


# ---------------------------------------------------------------------------
# trainable modules


class AdapterMLP(nn.Module):
    """Residual two-layer GELU MLP over video feature width (square hidden)."""

    def __init__(self, d_video: int):
        super().__init__()
        self.fc1 = nn.Linear(d_video, d_video)
        self.fc2 = nn.Linear(d_video, d_video)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(self.act(self.fc1(x)))


class BridgeSublayer(nn.Module):
    """One per-block video cross-attention insert.

    Audio stream is pre-normed locally; adapted video features pass through
    a combined key/value projection. The output projection is the
    transparency gate: zero at init, so the residual add is exact identity
    until training moves it.
    """

    def __init__(self, config: BackboneConfig, d_video: int):
        super().__init__()
        self.audio_norm = nn.LayerNorm(config.d_model)
        self.adapter = AdapterMLP(d_video)
        self.attn = MultiheadAttention(config.d_model, config.n_heads, d_kv=d_video,
                                       combined_kv=True, rope_base=config.rope_base)

    def forward(self, h: torch.Tensor, video_kv: torch.Tensor,
                audio_positions: torch.Tensor, video_positions: torch.Tensor,
                present_mask: torch.Tensor | None = None,
                rope_base: float | None = None) -> torch.Tensor:
        out = self.attn(self.audio_norm(h), video_kv,
                        q_positions=audio_positions, kv_positions=video_positions,
                        rope_base=rope_base)
        if present_mask is not None:
            out = out * present_mask.to(out.dtype)[:, None, None]
        return h + out


class VideoBridge(nn.Module):
    """The full trainable stack: one sublayer per backbone block."""

    def __init__(self, config: BackboneConfig, d_video: int = 16):
        super().__init__()
        config.validate()
        self.config = config
        self.d_video = d_video
        self.sublayers = nn.ModuleList(
            BridgeSublayer(config, d_video) for _ in range(config.n_blocks)
        )

    def adapt_all(self, video_tokens: torch.Tensor) -> list[torch.Tensor]:
        """Per-block adapted video features; input is detached first.

        The detach is the freeze boundary on the video side: gradients flow
        into the adapters and projections, never back into the features.
        """
        v = video_tokens.detach()
        return [sub.adapter(v) for sub in self.sublayers]

    def make_hook(self, block_idx: int, video_kv: torch.Tensor,
                  audio_positions: torch.Tensor, video_positions: torch.Tensor,
                  present_mask: torch.Tensor | None):
        sub = self.sublayers[block_idx]

        def hook(h: torch.Tensor) -> torch.Tensor:
            return sub(h, video_kv, audio_positions, video_positions, present_mask)

        return hook


def init_bridge(config: BackboneConfig, d_video: int = 16, seed: int = 0,
                zero_init: bool = True) -> VideoBridge:
    """Seeded bridge construction; equal (config, d_video, seed) is reproducible.

    With `zero_init` (the default) every output projection, weight and bias,
    starts at zero. Disable only for analysis that needs a generic point in
    parameter space.
    """
    bridge = VideoBridge(config, d_video=d_video)
    root = RngStream(seed, ("bridge-init",))
    for name, module in sorted(bridge.named_modules(), key=lambda kv: kv[0]):
        if isinstance(module, nn.Linear):
            stream = root.substream(name)
            fan_in = module.weight.shape[1]
            w = stream.normal(*module.weight.shape) / math.sqrt(fan_in)
            with torch.no_grad():
                module.weight.copy_(torch.from_numpy(w).to(module.weight.dtype))
                module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    if zero_init:
        with torch.no_grad():
            for sub in bridge.sublayers:
                sub.attn.out_proj.weight.zero_()
                sub.attn.out_proj.bias.zero_()
    return bridge


# identifier suffix -> submodule holding that tensor group (weight and bias)
MASK_SLOTS = {
    "mlp_w1": ("adapter", "fc1"),
    "mlp_w2": ("adapter", "fc2"),
    "W_q": ("attn", "q_proj"),
    "W_kv": ("attn", "kv_proj"),
    "W_o": ("attn", "out_proj"),
    "norm": ("audio_norm",),
}


def trainable_mask(backbone: Backbone, bridge: VideoBridge) -> set[str]:
    """Identifiers of every trainable tensor group, one set entry per slot.

    Per block: the two adapter maps, the query / combined key-value / output
    projections, and the audio-side norm. Nothing from the frozen model ever
    appears here; the sets of underlying tensors are also checked disjoint.
    """
    frozen_ids = {id(p) for p in backbone.parameters()}
    mask = set()
    for i, sub in enumerate(bridge.sublayers):
        for slot, path in MASK_SLOTS.items():
            module = sub
            for attr in path:
                module = getattr(module, attr)
            for p in module.parameters():
                if id(p) in frozen_ids:
                    raise ShapeError(f"block{i}.{slot} aliases a frozen backbone tensor")
            mask.add(f"block{i}.{slot}")
    return mask


def mask_modules(bridge: VideoBridge) -> dict[str, nn.Module]:
    """Identifier -> owning module, in the same naming scheme as trainable_mask."""
    out = {}
    for i, sub in enumerate(bridge.sublayers):
        for slot, path in MASK_SLOTS.items():
            module = sub
            for attr in path:
                module = getattr(module, attr)
            out[f"block{i}.{slot}"] = module
    return out


def trainable_parameters(bridge: VideoBridge, backbone: Backbone | None = None):
    """Named bridge parameters, checked disjoint from the frozen backbone."""
    params = dict(bridge.named_parameters())
    if backbone is not None:
        frozen_ids = {id(p) for p in backbone.parameters()}
        shared = [n for n, p in params.items() if id(p) in frozen_ids]
        if shared:
            raise ShapeError(f"bridge parameters alias frozen backbone tensors: {shared}")
    return params


# ---------------------------------------------------------------------------
# single-instance functional ops


def adapter_mlp(v: VideoTokens, params: AdapterMLP) -> VideoTokens:
    """Residual MLP over video tokens; positions and presence pass through."""
    if not isinstance(v, VideoTokens):
        raise ShapeError("adapter_mlp expects VideoTokens")
    d_in = v.tokens.shape[-1] if v.tokens.ndim == 2 else -1
    d_want = params.fc1.weight.shape[1]
    if v.s_v > 0 and d_in != d_want:
        raise ShapeError(f"adapter expects width {d_want}, got {d_in}")
    if v.s_v == 0:
        return VideoTokens(tokens=v.tokens.clone(), positions=v.positions.clone(),
                           eff_fps=v.eff_fps, present=v.present)
    weight_dtype = params.fc1.weight.dtype
    out = params(v.tokens.detach().to(weight_dtype))
    return VideoTokens(tokens=out, positions=v.positions.clone(),
                       eff_fps=v.eff_fps, present=v.present)


def video_cross_attention(x: LatentSequence, v: VideoTokens,
                          params: BridgeSublayer,
                          rope_base: float | None = None) -> LatentSequence:
    """One bridge sublayer on a single instance.

    `v` must already be adapter output (see adapter_mlp); absent video is an
    exact skip. `rope_base` overrides the base the params were built with.
    """
    if not v.present or v.s_v == 0:
        return LatentSequence(tokens=x.tokens.clone(), positions=x.positions.clone())
    out = params(x.tokens[None], v.tokens[None].to(x.tokens.dtype),
                 x.positions, v.positions, rope_base=rope_base)
    return LatentSequence(tokens=out[0], positions=x.positions.clone())


def bridged_forward(a_t: LatentSequence, t: float, text: TextTokens,
                    video: VideoTokens | None, backbone: Backbone,
                    bridge: VideoBridge | None, trace: list | None = None) -> LatentSequence:
    """Full single-instance velocity prediction, with or without the bridge."""
    tok, mask = backbone.prepare_text([text])
    vt = vp = pm = None
    use_bridge = None
    if bridge is not None and video is not None and video.present and video.s_v > 0:
        use_bridge = bridge
        vt = video.tokens[None].to(a_t.tokens.dtype)
        vp = video.positions
        pm = torch.ones(1)
    out = backbone(a_t.tokens[None], a_t.positions, torch.tensor([float(t)]),
                   tok, mask, bridge=use_bridge, video_tokens=vt,
                   video_positions=vp, video_present=pm, trace=trace)
    return LatentSequence(tokens=out[0], positions=a_t.positions.clone())
