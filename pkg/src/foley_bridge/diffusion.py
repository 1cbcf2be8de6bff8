"""v-prediction diffusion over audio latents.

Cosine schedule alpha=cos(pi t/2), sigma=sin(pi t/2) on continuous time
t in [0, 1]; the model predicts v = alpha*eps - sigma*a0, from which both
the clean latent and the noise are recoverable in closed form. Sampling is
deterministic: a uniform descending time grid with the standard re-noising
update, plus classifier-free guidance on the velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backbone import Backbone, TextTokens
from .bridge import VideoBridge
from .errors import DomainError, NumericError, ShapeError
from .rng import RngStream


# ---------------------------------------------------------------------------
# schedule and algebra


def schedule(t):
    """(alpha, sigma) at time t; accepts python floats or tensors in [0, 1]."""
    if isinstance(t, torch.Tensor):
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise DomainError("diffusion time must lie in [0, 1]")
        half_pi = math.pi / 2
        return torch.cos(half_pi * t), torch.sin(half_pi * t)
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"diffusion time must lie in [0, 1], got {t}")
    return math.cos(math.pi * t / 2), math.sin(math.pi * t / 2)


def _bcast(coef, like: torch.Tensor):
    if isinstance(coef, torch.Tensor) and coef.ndim > 0:
        return coef.reshape(coef.shape + (1,) * (like.ndim - coef.ndim)).to(like.dtype)
    return coef


def corrupt(a0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Forward corruption a_t = alpha*a0 + sigma*eps."""
    if a0.shape != eps.shape:
        raise ShapeError(f"a0 {tuple(a0.shape)} and eps {tuple(eps.shape)} must match")
    alpha, sigma = schedule(t)
    return _bcast(alpha, a0) * a0 + _bcast(sigma, a0) * eps


def v_target(a0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    """Training target v = alpha*eps - sigma*a0."""
    if a0.shape != eps.shape:
        raise ShapeError(f"a0 {tuple(a0.shape)} and eps {tuple(eps.shape)} must match")
    alpha, sigma = schedule(t)
    return _bcast(alpha, a0) * eps - _bcast(sigma, a0) * a0


def a0_from_v(a_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    """Clean-latent estimate a0 = alpha*a_t - sigma*v."""
    alpha, sigma = schedule(t)
    return _bcast(alpha, a_t) * a_t - _bcast(sigma, a_t) * v


def eps_from_v(a_t: torch.Tensor, v: torch.Tensor, t) -> torch.Tensor:
    """Noise estimate eps = sigma*a_t + alpha*v."""
    alpha, sigma = schedule(t)
    return _bcast(sigma, a_t) * a_t + _bcast(alpha, a_t) * v


def cfg_combine(v_cond: torch.Tensor, v_uncond: torch.Tensor, scale: float) -> torch.Tensor:
    """Classifier-free guidance: v_u + scale * (v_c - v_u)."""
    if v_uncond.shape != v_cond.shape:
        raise ShapeError("guidance branches must have equal shapes")
    if not math.isfinite(scale):
        raise NumericError(f"guidance scale must be finite, got {scale}")
    return v_uncond + scale * (v_cond - v_uncond)


# ---------------------------------------------------------------------------
# loss


def batch_loss(pred: torch.Tensor, target: torch.Tensor):
    """Mean-squared error, also returned per sample.

    Raises with the offending batch index if any sample's loss is
    non-finite, so a blown-up run names the clip slot that did it.
    """
    if pred.shape != target.shape or pred.ndim != 3:
        raise ShapeError(
            f"expected matching [B, s, d] tensors, got {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    per_sample = ((pred - target) ** 2).mean(dim=(1, 2))
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        bad = int((~finite).nonzero()[0])
        raise NumericError(f"non-finite loss at batch index {bad}")
    return per_sample.mean(), per_sample


@dataclass
class TrainConfig:
    """Knobs that shape a training step (the optimizer itself lives elsewhere)."""

    batch_size: int = 16
    steps: int = 1000
    lr: float = 1e-3
    token_drop_p: float = 0.10
    text_drop_p: float = 0.0
    cfg_scale_eval: float = 2.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.steps < 1:
            raise DomainError("batch_size and steps must be >= 1")
        if not 0.0 <= self.token_drop_p <= 1.0 or not 0.0 <= self.text_drop_p <= 1.0:
            raise DomainError("drop probabilities must lie in [0, 1]")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise DomainError(f"lr must be positive, got {self.lr}")
        return self


@dataclass
class TrainBatch:
    """One batch of paired training examples sharing a latent length.

    `video_tokens` is [B, s_v, d_video] with positions shared across the
    batch; rows whose video was dropped are masked at the sublayer output,
    not zeroed here.
    """

    a0: torch.Tensor
    texts: list
    video_tokens: torch.Tensor | None = None
    video_positions: torch.Tensor | None = None
    positions: torch.Tensor | None = None

    def __post_init__(self):
        if self.a0.ndim != 3:
            raise ShapeError(f"a0 must be [B, s, d], got {tuple(self.a0.shape)}")
        if len(self.texts) != self.a0.shape[0]:
            raise ShapeError("one text per batch row required")
        if self.positions is None:
            self.positions = torch.arange(self.a0.shape[1])


def training_forward(backbone: Backbone, bridge: VideoBridge,
                     a0: torch.Tensor, positions: torch.Tensor,
                     texts: list[TextTokens],
                     video_tokens: torch.Tensor, video_positions: torch.Tensor,
                     step_stream: RngStream,
                     video_drop_p: float = 0.10, text_drop_p: float = 0.0):
    """One training forward: corrupt, predict v, MSE.

    All randomness (times, noise, condition drops) comes from `step_stream`
    substreams, so a step is a pure function of (weights, data, stream) and
    training can resume mid-run bit-exactly. Video drop multiplies the
    sublayer output by a 0/1 mask, which keeps dropped samples exactly on
    the unconditional path. Returns (loss, info); caller owns backward.
    """
    b, s, d = a0.shape
    t = torch.from_numpy(step_stream.substream("t").uniform(size=b))
    eps = torch.from_numpy(step_stream.substream("eps").normal(b, s, d)).to(a0.dtype)
    drop_u = step_stream.substream("drop").uniform(size=b)
    present = torch.from_numpy((drop_u >= video_drop_p).astype("float32"))
    if text_drop_p > 0.0:
        text_u = step_stream.substream("text-drop").uniform(size=b)
        texts = [TextTokens.absent(backbone.config.d_text) if u < text_drop_p else tt
                 for u, tt in zip(text_u, texts)]
    text_tokens, text_mask = backbone.prepare_text(texts)

    a_t = corrupt(a0, eps, t.to(a0.dtype))
    target = v_target(a0, eps, t.to(a0.dtype))
    pred = backbone(a_t, positions, t, text_tokens, text_mask,
                    bridge=bridge, video_tokens=video_tokens,
                    video_positions=video_positions, video_present=present)
    loss, per_sample = batch_loss(pred, target)
    info = {
        "t": t,
        "per_sample": per_sample.detach(),
        "drop_count": int(b - present.sum().item()),
        "loss": float(loss.detach()),
    }
    return loss, info


def training_step(batch: TrainBatch, backbone: Backbone, bridge: VideoBridge,
                  cfg: TrainConfig, rng: RngStream):
    """One full step's loss and analytic gradients for the trainable surface.

    Returns (loss value, {parameter name: gradient tensor}); the frozen
    model contributes no entries. Parameter updates are the caller's job.
    """
    cfg.validate()
    loss, info = training_forward(
        backbone, bridge, batch.a0, batch.positions, batch.texts,
        batch.video_tokens, batch.video_positions, rng,
        video_drop_p=cfg.token_drop_p, text_drop_p=cfg.text_drop_p)
    names, params = zip(*bridge.named_parameters())
    grad_list = torch.autograd.grad(loss, params, allow_unused=True)
    grads = {n: (g if g is not None else torch.zeros_like(p))
             for n, p, g in zip(names, params, grad_list)}
    return float(loss.detach()), grads


# ---------------------------------------------------------------------------
# sampling


def time_grid(steps: int) -> list[float]:
    """Uniform descending grid 1 -> 0 with steps+1 points."""
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    return [1.0 - k / steps for k in range(steps + 1)]


def sample_with_model(v_fn, a_init: torch.Tensor, steps: int) -> torch.Tensor:
    """Deterministic integration from pure noise at t=1 down to t=0.

    `v_fn(a_t, t) -> v` is any velocity predictor. Each step converts the
    prediction to (a0, eps) estimates and re-noises to the next grid time;
    the final step lands exactly on the clean estimate.
    """
    ts = time_grid(steps)
    a = a_init
    for k in range(steps):
        t_cur, t_next = ts[k], ts[k + 1]
        v = v_fn(a, t_cur)
        a0_hat = a0_from_v(a, v, t_cur)
        if t_next == 0.0:
            a = a0_hat
        else:
            eps_hat = eps_from_v(a, v, t_cur)
            a = corrupt(a0_hat, eps_hat, t_next)
    if not bool(torch.isfinite(a).all()):
        raise NumericError("sampler produced non-finite latents")
    return a


def sample_batch(backbone: Backbone, bridge: VideoBridge | None,
                 texts: list[TextTokens], video_tokens, video_positions,
                 video_present, s_a: int, steps: int, cfg_scale: float,
                 eps_init: torch.Tensor, positions: torch.Tensor | None = None) -> torch.Tensor:
    """Batched guided sampling; texts/video rows align with eps_init rows.

    The unconditional branch drops both the prompt and the video. With
    cfg_scale == 1 the combination reduces to the conditional branch alone,
    so the second forward is skipped.
    """
    b = eps_init.shape[0]
    if eps_init.shape[1] != s_a:
        raise ShapeError(f"eps_init length {eps_init.shape[1]} != s_a {s_a}")
    if positions is None:
        positions = torch.arange(s_a)
    cond_tok, cond_mask = backbone.prepare_text(texts)
    has_video = (bridge is not None and video_tokens is not None
                 and video_tokens.shape[1] > 0)
    has_cond = has_video or any(tt.present for tt in texts)
    uncond_tok, uncond_mask = backbone.prepare_text(
        [TextTokens.absent(backbone.config.d_text)] * b)

    def v_fn(a_t, t):
        tv = torch.full((b,), float(t))
        v_c = backbone(a_t, positions, tv, cond_tok, cond_mask,
                       bridge=bridge if has_video else None,
                       video_tokens=video_tokens if has_video else None,
                       video_positions=video_positions if has_video else None,
                       video_present=video_present if has_video else None)
        if cfg_scale == 1.0 or not has_cond:
            return v_c
        v_u = backbone(a_t, positions, tv, uncond_tok, uncond_mask)
        return cfg_combine(v_c, v_u, cfg_scale)

    with torch.no_grad():
        return sample_with_model(v_fn, eps_init, steps)


def sample(backbone: Backbone, bridge: VideoBridge | None, text: TextTokens,
           video, n_steps: int, cfg_scale: float, rng,
           s_a: int | None = None):
    """Single-clip generation; returns a clean [s_a, d] latent sequence.

    `video` is a VideoTokens instance or None; absent/None video conditions
    on text alone (still guided when cfg_scale != 1). `rng` is an RngStream
    or a bare seed. `s_a` defaults to one latent frame per effective video
    frame and must be given when there is no video.
    """
    from .backbone import LatentSequence

    if s_a is None:
        if video is not None and video.present and video.s_v > 0:
            s_a = int(video.positions.max()) + 1
        else:
            raise DomainError("s_a is required when sampling without video")
    d = backbone.config.d_model
    stream = rng if isinstance(rng, RngStream) else RngStream(int(rng), ("sample-init",))
    eps0 = torch.from_numpy(stream.normal(1, s_a, d)).to(torch.float32)
    vt = vp = pm = None
    if video is not None and video.present and video.s_v > 0:
        vt = video.tokens[None].to(eps0.dtype)
        vp = video.positions
        pm = torch.ones(1)
    out = sample_batch(backbone, bridge, [text], vt, vp, pm,
                       s_a=s_a, steps=n_steps, cfg_scale=cfg_scale, eps_init=eps0)
    return LatentSequence(tokens=out[0], positions=torch.arange(s_a))


def eval_v_mse(backbone: Backbone, bridge: VideoBridge | None,
               clips, stream: RngStream, n_draws: int = 8,
               use_video: bool = True) -> float:
    """Mean v-prediction MSE over fixed seeded (t, eps) draws.

    `clips` yields (a0 [s, d], text, video) triples. The same stream seeds
    give the same draws, so two models are compared on identical noise.
    """
    total = 0.0
    count = 0
    with torch.no_grad():
        for idx, (a0, text, video) in enumerate(clips):
            cs = stream.substream("clip", idx)
            s, d = a0.shape
            t = torch.from_numpy(cs.substream("t").uniform(size=n_draws))
            eps = torch.from_numpy(cs.substream("eps").normal(n_draws, s, d)).to(a0.dtype)
            a0b = a0[None].expand(n_draws, s, d)
            a_t = corrupt(a0b, eps, t.to(a0.dtype))
            target = v_target(a0b, eps, t.to(a0.dtype))
            tok, mask = backbone.prepare_text([text] * n_draws)
            vt = vp = pm = None
            br = None
            if use_video and bridge is not None and video is not None \
                    and video.present and video.s_v > 0:
                br = bridge
                vt = video.tokens[None].expand(n_draws, video.s_v, video.tokens.shape[1])
                vt = vt.to(a0.dtype)
                vp = video.positions
                pm = torch.ones(n_draws)
            pred = backbone(a_t, torch.arange(s), t, tok, mask, bridge=br,
                            video_tokens=vt, video_positions=vp, video_present=pm)
            _, per_sample = batch_loss(pred, target)
            total += float(per_sample.sum())
            count += n_draws
    return total / max(count, 1)
