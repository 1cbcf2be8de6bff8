"""Bridge training loop with bit-exact checkpointing and resume.

Only the bridge trains; the backbone stays frozen. Each step derives its
batch indices, times, noise, and condition drops from a stream keyed by
(run seed, step), so state never accumulates in the RNG: resuming from a
checkpoint at step k replays exactly the steps a straight run would take.
The optimizer is implemented here so its entire state round-trips through
the tensor blob format without float drift.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import Backbone, TextTokens, encode_prompt, init_backbone
from .bridge import VideoBridge, init_bridge, pool_video, trainable_parameters
from .config import RunConfig, config_from_dict, config_hash, config_to_dict, model_hash
from .curation import read_manifest
from .diffusion import training_forward
from .errors import IncompatibilityError, InputError
from .rng import RngStream
from .synthdata import load_clip
from .tensorio import load_tensors, save_tensors


class Adam(object):
    """Plain Adam over named parameters; state is two moment tensors each.

    No weight decay, bias-corrected, eps inside the square root's
    denominator as in the reference formulation.
    """

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    @torch.no_grad()
    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[n].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            self.v[n].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            denom = (self.v[n] / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(self.m[n] / bc1, denom, value=-self.lr)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for n in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int):
        self.t = int(t)
        with torch.no_grad():
            for n, p in self.params.items():
                self.m[n] = torch.from_numpy(tensors[f"adam.m.{n}"]).to(p.dtype).clone()
                self.v[n] = torch.from_numpy(tensors[f"adam.v.{n}"]).to(p.dtype).clone()


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainData:
    a0: torch.Tensor          # [n, s_a, d_model]
    video: torch.Tensor       # [n, s_v, d_video]
    video_positions: torch.Tensor
    texts: list[TextTokens]
    latent_fps: float
    clip_ids: list[str] = field(default_factory=list)


def load_training_data(cfg: RunConfig, split: str = "train") -> TrainData:
    records = [r for r in read_manifest(os.path.join(cfg.corpus_dir, "manifest.jsonl"))
               if r.split == split and r.live]
    if not records:
        raise InputError(f"no live {split!r} records in {cfg.corpus_dir}")
    pooling = cfg.pooling_spec()
    a0s, vids, texts, ids = [], [], [], []
    positions = None
    for r in records:
        clip = load_clip(cfg.corpus_dir, r)
        pooled = pool_video(clip.video, pooling)
        a0s.append(clip.a0)
        vids.append(pooled.tokens)
        texts.append(encode_prompt(clip.prompt, cfg.d_text))
        ids.append(clip.clip_id)
        if positions is None:
            positions = pooled.positions
            latent_fps = clip.latent_fps
        elif pooled.tokens.shape != vids[0].shape:
            raise InputError(f"clip {r.clip_id} video token shape differs within corpus")
    return TrainData(a0=torch.stack(a0s), video=torch.stack(vids),
                     video_positions=positions, texts=texts,
                     latent_fps=latent_fps, clip_ids=ids)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, cfg: RunConfig, bridge: VideoBridge, opt: Adam,
                    step: int, grad_seen: dict[str, bool], last_loss: float):
    tensors = {f"bridge.{n}": p.detach() for n, p in bridge.named_parameters()}
    tensors.update(opt.state_tensors())
    meta = {
        "kind": "bridge-checkpoint",
        "step": int(step),
        "adam_t": int(opt.t),
        "lr": opt.lr,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "model_hash": model_hash(cfg),
        "grad_seen": {k: bool(v) for k, v in sorted(grad_seen.items())},
        "last_loss": float(last_loss),
    }
    save_tensors(path, tensors, meta=meta)


def load_checkpoint(path: str):
    """Returns (tensors, meta); raises if the embedded config was tampered."""
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "bridge-checkpoint":
        raise InputError(f"{path} is not a training checkpoint")
    cfg = config_from_dict(meta["config"])
    if model_hash(cfg) != meta["model_hash"]:
        raise IncompatibilityError(
            f"checkpoint {path}: architecture hash mismatch "
            f"({meta['model_hash'][:12]} recorded, {model_hash(cfg)[:12]} recomputed)"
        )
    return tensors, meta


def build_models(cfg: RunConfig) -> tuple[Backbone, VideoBridge]:
    backbone = init_backbone(cfg.backbone_config(), cfg.init_seed)
    bridge = init_bridge(cfg.backbone_config(), d_video=cfg.d_video,
                         seed=cfg.init_seed)
    return backbone, bridge


def models_from_checkpoint(path: str) -> tuple[Backbone, VideoBridge, dict]:
    """Rebuild (backbone, bridge) exactly as trained, from the checkpoint alone."""
    tensors, meta = load_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    backbone, bridge = build_models(cfg)
    with torch.no_grad():
        for n, p in bridge.named_parameters():
            p.copy_(torch.from_numpy(tensors[f"bridge.{n}"]).to(p.dtype))
    return backbone, bridge, meta


# ---------------------------------------------------------------------------
# the loop


def train_run(cfg: RunConfig, resume_path: str | None = None,
              log_fh=None) -> dict:
    """Train the bridge per config; writes checkpoints and a JSONL log.

    Returns a summary dict (final step, loss, checkpoint paths, grad_seen).
    With `resume_path`, training continues from the recorded step after an
    exact-config check; the result is bit-identical to an uninterrupted run.
    """
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    backbone, bridge = build_models(cfg)
    params = trainable_parameters(bridge, backbone)
    opt = Adam(params, lr=cfg.lr)
    grad_seen = {n: False for n in params}
    start_step = 0
    if resume_path is not None:
        tensors, meta = load_checkpoint(resume_path)
        if meta["config_hash"] != config_hash(cfg):
            raise IncompatibilityError(
                "resume config does not match checkpoint "
                f"({meta['config_hash'][:12]} vs {config_hash(cfg)[:12]})"
            )
        with torch.no_grad():
            for n, p in bridge.named_parameters():
                p.copy_(torch.from_numpy(tensors[f"bridge.{n}"]).to(p.dtype))
        opt.load_state_tensors(tensors, meta["adam_t"])
        grad_seen.update(meta["grad_seen"])
        start_step = int(meta["step"])

    data = load_training_data(cfg)
    n_train = data.a0.shape[0]
    audio_positions = torch.arange(data.a0.shape[1])
    ckpt_paths = []
    last_loss = float("nan")
    log_path = os.path.join(cfg.out_dir, "train.log")
    own_log = log_fh is None
    if own_log:
        log_fh = open(log_path, "a" if resume_path else "w", encoding="utf-8")
    try:
        for step in range(start_step, cfg.steps):
            t0 = time.monotonic()
            step_stream = RngStream(cfg.run_seed, ("train", "step", step))
            idx = step_stream.substream("batch").integers(0, n_train, size=cfg.batch_size)
            idx_t = torch.from_numpy(np.asarray(idx))
            a0 = data.a0[idx_t]
            video = data.video[idx_t]
            texts = [data.texts[int(i)] for i in idx]
            opt.zero_grad()
            loss, info = training_forward(
                backbone, bridge, a0, audio_positions, texts,
                video, data.video_positions, step_stream,
                video_drop_p=cfg.token_drop_p, text_drop_p=cfg.text_drop_p,
            )
            loss.backward()
            for n, p in params.items():
                if not grad_seen[n] and p.grad is not None and bool((p.grad != 0).any()):
                    grad_seen[n] = True
            opt.step()
            last_loss = info["loss"]
            done = step + 1
            log_fh.write(json.dumps({
                "step": done,
                "loss": last_loss,
                "wall_ms": round(1000.0 * (time.monotonic() - t0), 3),
                "drop_count": info["drop_count"],
            }, sort_keys=True) + "\n")
            if done % cfg.log_every == 0 or done == cfg.steps:
                log_fh.flush()
            if done % cfg.checkpoint_every == 0 or done == cfg.steps:
                path = os.path.join(cfg.out_dir, f"ckpt_{done:06d}.bin")
                save_checkpoint(path, cfg, bridge, opt, done, grad_seen, last_loss)
                ckpt_paths.append(path)
    finally:
        if own_log:
            log_fh.close()
    return {
        "final_step": cfg.steps,
        "last_loss": last_loss,
        "checkpoints": ckpt_paths,
        "grad_seen": grad_seen,
        "config_hash": config_hash(cfg),
        "model_hash": model_hash(cfg),
    }
