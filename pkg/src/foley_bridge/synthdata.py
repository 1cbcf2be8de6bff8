"""Synthetic paired audio/video clip generator.

Each clip is a set of impulsive events on a shared timeline: the video
shows a class-specific patch pattern at the event frame (half strength on
the following frame), the audio latent carries a decaying class-specific
envelope from the same instant. Latent frames run at the effective video
frame rate, so a latent token and the video token for the same moment sit
at the same rotary position and synchrony is expressible as a fixed
relative offset.

Class identities (audio direction, video pattern) are functions of the
label alone, so every corpus shares the same class geometry.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .bridge import RawVideoTokens
from .errors import GenerationError
from .rng import RngStream
from .tensorio import load_tensors, save_tensors

DEFAULT_CLASSES = ("thud", "clink", "splash", "tick")
CLASS_ASSET_SEED = 7  # label-keyed constants, shared by all corpora

VIDEO_FPS = 16.0
VIDEO_STRIDE = 2
LATENT_FPS = VIDEO_FPS / VIDEO_STRIDE  # latent rate matches effective video rate
D_LATENT = 64
D_VIDEO = 16
N_PATCHES = 64
NOISE_FLOOR = 0.05
# Minimum latent frames between onsets. The onset detector box-smooths
# novelty over 3 frames, so spikes need a clear frame between their smoothed
# supports to register as separate upward crossings; gap 4 guarantees it.
MIN_EVENT_GAP = 4
AMP_RANGE = (2.4, 3.2)
TAU_RANGE = (2.0, 6.0)
LATENT_BOUND = 3.0


@dataclass
class Clip:
    clip_id: str
    label: str
    class_id: int
    prompt: str
    duration: float
    a0: torch.Tensor
    video: RawVideoTokens
    event_frames: list[int]
    latent_fps: float = LATENT_FPS
    meta: dict = field(default_factory=dict)

    @property
    def s_a(self) -> int:
        return self.a0.shape[0]

    @property
    def onsets_s(self) -> list[float]:
        return [f / self.latent_fps for f in self.event_frames]


def class_audio_direction(label: str, d_latent: int = D_LATENT) -> np.ndarray:
    """Unit direction in latent space that this class's events excite."""
    v = RngStream(CLASS_ASSET_SEED, ("class-audio", label)).normal(d_latent)
    return v / np.linalg.norm(v)


def class_video_pattern(label: str, n_patches: int = N_PATCHES,
                        d_video: int = D_VIDEO) -> np.ndarray:
    """Per-patch event pattern [n_patches, d_video].

    A common-mode component survives whole-frame mean pooling; the
    per-patch residual only shows up under spatial grid pooling.
    """
    stream = RngStream(CLASS_ASSET_SEED, ("class-video", label))
    common = stream.substream("common").normal(d_video)
    common = 1.5 * common / np.linalg.norm(common)
    local = 0.5 * stream.substream("local").normal(n_patches, d_video)
    return common[None, :] + local


def _place_events(stream: RngStream, n_events: int, s_a: int,
                  min_gap: int = MIN_EVENT_GAP) -> list[int]:
    """Sorted event frames in [1, s_a-1] with pairwise gaps >= min_gap."""
    if n_events == 0:
        return []
    lo = 1
    span = (s_a - 1) - lo + 1 - (n_events - 1) * (min_gap - 1)
    if n_events < 0 or span < n_events:
        raise GenerationError(
            f"cannot place {n_events} events in {s_a} effective frames "
            f"(at most one per frame, gap {min_gap})"
        )
    picks = np.sort(stream.choice(span, size=n_events, replace=False))
    return [int(lo + y + i * (min_gap - 1)) for i, y in enumerate(picks)]


def _gen_clip(stream: RngStream, clip_id: str, label: str,
              duration: float = 4.0, n_events: int | None = None,
              min_gap: int = MIN_EVENT_GAP,
              d_latent: int = D_LATENT, d_video: int = D_VIDEO,
              n_patches: int = N_PATCHES, fps: float = VIDEO_FPS,
              stride: int = VIDEO_STRIDE,
              noise_floor: float = NOISE_FLOOR) -> Clip:
    """Generate one paired clip from a dedicated stream."""
    latent_fps = fps / stride
    s_a = int(round(duration * latent_fps))
    if s_a < 2:
        raise GenerationError(f"duration {duration}s too short at {latent_fps} fps latents")
    if n_events is None:
        n_events = int(stream.substream("n-events").integers(1, 4))
    events = _place_events(stream.substream("events"), n_events, s_a, min_gap=min_gap)

    a0 = noise_floor * stream.substream("audio-noise").normal(s_a, d_latent)
    direction = class_audio_direction(label, d_latent)
    amps = stream.substream("amps").uniform(AMP_RANGE[0], AMP_RANGE[1], size=n_events)
    taus = stream.substream("taus").uniform(TAU_RANGE[0], TAU_RANGE[1], size=n_events)
    for f, amp, tau in zip(events, amps, taus):
        k = np.arange(s_a - f, dtype=np.float64)
        a0[f:] += (amp * np.exp(-k / tau))[:, None] * direction[None, :]
    # densely stacked events can push past the latent range; saturate there
    np.clip(a0, -LATENT_BOUND, LATENT_BOUND, out=a0)

    # video is stored at the encoder's effective frame rate (fps / stride),
    # one latent frame per effective frame
    frames = noise_floor * stream.substream("video-noise").normal(s_a, n_patches, d_video)
    pattern = class_video_pattern(label, n_patches, d_video)
    for f in events:
        frames[f] += pattern
        if f + 1 < s_a:
            frames[f + 1] += 0.5 * pattern
    class_id = DEFAULT_CLASSES.index(label) if label in DEFAULT_CLASSES else -1

    return Clip(
        clip_id=clip_id,
        label=label,
        class_id=class_id,
        prompt=label,
        duration=duration,
        a0=torch.from_numpy(a0).to(torch.float32),
        video=RawVideoTokens(tokens=torch.from_numpy(frames).to(torch.float32),
                             fps=fps, stride=stride),
        event_frames=events,
        latent_fps=latent_fps,
        meta={"n_events": n_events},
    )


def gen_clip(seed: int, duration_s: float = 4.0, n_events: int | None = None,
             class_id: int | None = None, min_gap: int = MIN_EVENT_GAP) -> Clip:
    """Generate one clip from a bare seed.

    `n_events=0` yields background noise only. Rejection happens when the
    requested events cannot fit the effective frames at `min_gap` spacing.
    """
    stream = RngStream(seed, ("clip",))
    if class_id is None:
        class_id = int(stream.substream("class").integers(0, len(DEFAULT_CLASSES)))
    if not 0 <= class_id < len(DEFAULT_CLASSES):
        raise GenerationError(f"class_id must be in [0, {len(DEFAULT_CLASSES)}), got {class_id}")
    return _gen_clip(stream, f"seed{seed}", DEFAULT_CLASSES[class_id],
                     duration=duration_s, n_events=n_events, min_gap=min_gap)


def _split_counts(per_class: dict[str, int], ratio: float) -> dict[str, int]:
    """Largest-remainder allocation of train slots across classes.

    The global train total is round(ratio * n); each class gets the floor
    of its quota, the remainder goes to the largest fractional parts in
    label order. Both splits are kept nonempty whenever n >= 2.
    """
    n = sum(per_class.values())
    total_train = int(round(ratio * n))
    total_train = min(max(total_train, 1), n - 1) if n >= 2 else total_train
    labels = sorted(per_class)
    quotas = {c: ratio * per_class[c] for c in labels}
    floors = {c: min(int(quotas[c]), per_class[c]) for c in labels}
    deficit = total_train - sum(floors.values())
    order = sorted(labels, key=lambda c: (-(quotas[c] - floors[c]), c))
    for c in order:
        if deficit <= 0:
            break
        if floors[c] < per_class[c]:
            floors[c] += 1
            deficit -= 1
    return floors


def gen_corpus(n: int, seed: int, out_dir: str,
               classes: tuple[str, ...] = DEFAULT_CLASSES,
               duration: float = 4.0, split_ratio: float = 0.9,
               **clip_kwargs) -> list:
    """Generate n clips, write tensor blobs and a JSONL manifest.

    Clip i gets class classes[i % len(classes)] and its own derived
    stream, so any clip can be regenerated in isolation. The train/val
    split is stratified per class with a largest-remainder allocation and
    seeded within-class shuffles.
    """
    from .curation import ClipRecord, write_manifest

    if n < 2:
        raise GenerationError(f"corpus needs at least 2 clips for a split, got {n}")
    root = RngStream(seed, ("corpus",))
    clips_dir = os.path.join(out_dir, "clips")
    os.makedirs(clips_dir, exist_ok=True)

    labels = [classes[i % len(classes)] for i in range(n)]
    per_class: dict[str, int] = {}
    for lab in labels:
        per_class[lab] = per_class.get(lab, 0) + 1
    train_counts = _split_counts(per_class, split_ratio)

    by_class: dict[str, list[int]] = {lab: [] for lab in per_class}
    for i, lab in enumerate(labels):
        by_class[lab].append(i)
    split_of: dict[int, str] = {}
    for lab in sorted(by_class):
        idxs = by_class[lab]
        perm = root.substream("split", lab).permutation(len(idxs))
        for rank, j in enumerate(perm):
            split_of[idxs[j]] = "train" if rank < train_counts[lab] else "val"

    records = []
    for i in range(n):
        clip_id = f"clip{i:05d}"
        clip = _gen_clip(root.substream("clip", i), clip_id, labels[i],
                         duration=duration, **clip_kwargs)
        rel = os.path.join("clips", f"{clip_id}.bin")
        save_tensors(
            os.path.join(out_dir, rel),
            {"a0": clip.a0, "video": clip.video.tokens},
            meta={
                "clip_id": clip_id,
                "label": clip.label,
                "class_id": clip.class_id,
                "prompt": clip.prompt,
                "duration": clip.duration,
                "fps": clip.video.fps,
                "stride": clip.video.stride,
                "latent_fps": clip.latent_fps,
                "event_frames": clip.event_frames,
            },
        )
        records.append(ClipRecord(
            clip_id=clip_id, label=clip.label, prompt=clip.prompt,
            split=split_of[i], path=rel, duration=clip.duration,
            meta={"n_events": len(clip.event_frames),
                  "event_frames": clip.event_frames,
                  "class_id": clip.class_id,
                  "s_a": clip.s_a},
        ))
    write_manifest(os.path.join(out_dir, "manifest.jsonl"), records)
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump({"n": n, "seed": seed, "classes": list(classes),
                   "duration": duration, "split_ratio": split_ratio},
                  fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return records


def load_clip(corpus_dir: str, record) -> Clip:
    """Rehydrate a clip from its blob; record is a ClipRecord."""
    tensors, meta = load_tensors(os.path.join(corpus_dir, record.path))
    label = meta["label"]
    return Clip(
        clip_id=meta["clip_id"],
        label=label,
        class_id=int(meta.get("class_id", -1)),
        prompt=meta["prompt"],
        duration=float(meta["duration"]),
        a0=torch.from_numpy(tensors["a0"]),
        video=RawVideoTokens(tokens=torch.from_numpy(tensors["video"]),
                             fps=float(meta["fps"]),
                             stride=int(meta.get("stride", VIDEO_STRIDE))),
        event_frames=[int(f) for f in meta["event_frames"]],
        latent_fps=float(meta["latent_fps"]),
        meta={"n_events": len(meta["event_frames"])},
    )
