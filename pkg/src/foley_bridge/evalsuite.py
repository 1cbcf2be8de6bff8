"""Evaluation metrics and report for generated audio latents.

Distribution metrics (Frechet distance per audio embedder, mean KL per
classifier) compare generated clips against references; instance metrics
(IB cosine, onset DeSync) score each generated clip against its own video
and event times. Embedders and classifiers are small deterministic
stand-ins registered by name, so every number in the report is exactly
reproducible.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import TextTokens, encode_prompt
from .bridge import PoolingSpec, pool_video
from .diffusion import sample_batch
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .rng import RngStream
from .synthdata import DEFAULT_CLASSES, class_audio_direction, class_video_pattern, load_clip

EVAL_ROW_ORDER = ("kl_panns", "kl_passt", "ib", "fd_vgg", "fd_panns", "fd_passt", "desync")
EVAL_ROW_LABELS = ("KL-PANNs", "KL-PaSST", "IB", "FD-VGG", "FD-PANNs", "FD-PaSST", "DeSync")


# ---------------------------------------------------------------------------
# embedding containers


@dataclass
class EmbeddingSet:
    embeddings: np.ndarray
    provider_id: str = ""

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ShapeError(f"embeddings must be [n, d], got {self.embeddings.shape}")
        if not np.isfinite(self.embeddings).all():
            raise NumericError(f"embedding set {self.provider_id!r} has non-finite entries")


@dataclass
class PosteriorSet:
    posteriors: np.ndarray
    provider_id: str = ""

    def __post_init__(self):
        self.posteriors = np.asarray(self.posteriors, dtype=np.float64)
        if self.posteriors.ndim != 2:
            raise ShapeError(f"posteriors must be [n, c], got {self.posteriors.shape}")
        if (self.posteriors < 0).any() or \
                not np.allclose(self.posteriors.sum(axis=1), 1.0, atol=1e-6):
            raise DomainError(f"posterior set {self.provider_id!r} rows must be distributions")


def _as_matrix(x, attr: str) -> np.ndarray:
    inner = getattr(x, attr, None)
    return np.asarray(inner if inner is not None else x, dtype=np.float64)


# ---------------------------------------------------------------------------
# distribution metrics


def frechet_distance(a, b, tol: float = 1e-8) -> float:
    """Frechet distance between gaussians fit to two sample sets.

    Accepts EmbeddingSet instances or plain [n, d] arrays. The matrix square
    root of Sigma_a Sigma_b is evaluated through the symmetric product
    Sb^(1/2) Sigma_a Sb^(1/2); eigenvalues below -tol raise, anything in
    [-tol, 0) is treated as numerical zero.
    """
    a = _as_matrix(a, "embeddings")
    b = _as_matrix(b, "embeddings")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"expected [n, d] sets of equal width, got {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DomainError("need at least 2 samples per set for a covariance")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])

    def _psd_sqrt(m: np.ndarray) -> np.ndarray:
        vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
        if (vals < -tol).any():
            raise NumericError(f"covariance eigenvalue {vals.min():.3e} below -{tol}")
        vals = np.clip(vals, 0.0, None)
        return (vecs * np.sqrt(vals)) @ vecs.T

    sb_half = _psd_sqrt(cov_b)
    inner = sb_half @ cov_a @ sb_half
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if (vals < -tol).any():
        raise NumericError(f"cross-covariance eigenvalue {vals.min():.3e} below -{tol}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fd = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def mean_kl(ref, gen, eps: float = 1e-10) -> float:
    """Mean KL(ref || gen) over paired posterior rows.

    Accepts PosteriorSet instances or plain [n, c] arrays. Generated
    probabilities are floored at eps inside the log; reference zeros
    contribute exactly zero.
    """
    p = _as_matrix(ref, "posteriors")
    q = _as_matrix(gen, "posteriors")
    if p.shape != q.shape or p.ndim != 2:
        raise ShapeError(f"paired posteriors must share shape, got {p.shape} vs {q.shape}")
    logq = np.log(np.maximum(q, eps))
    terms = np.where(p > 0, p * (np.log(np.maximum(p, eps)) - logq), 0.0)
    return float(terms.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# onset detection and synchrony


def onset_novelty(a) -> np.ndarray:
    """Positive first difference of per-frame L2 norm; index 0 is 0."""
    tokens = getattr(a, "tokens", a)
    arr = np.asarray(torch.as_tensor(tokens).detach().cpu().numpy(), dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"latents must be [s_a, d], got {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    nov = np.zeros(arr.shape[0], dtype=np.float64)
    nov[1:] = np.maximum(norms[1:] - norms[:-1], 0.0)
    return nov


def onset_detect(a, threshold: float = 0.3, fps: float = 8.0,
                 smooth: int = 3, refractory: int = 2) -> list[float]:
    """Onset times in seconds from latent-frame norm novelty.

    `a` is a latent sequence (or bare [s_a, d] tensor) at `fps` frames per
    second. The novelty is box-smoothed over `smooth` frames; each upward
    threshold crossing is refined to the raw-novelty argmax over the next
    `smooth` frames, and further onsets within `refractory` frames are
    suppressed.
    """
    if threshold <= 0:
        raise DomainError(f"threshold must be positive, got {threshold}")
    if fps <= 0:
        raise DomainError(f"fps must be positive, got {fps}")
    nov = onset_novelty(a)
    n = nov.shape[0]
    if n == 0:
        return []
    kernel = np.ones(smooth) / smooth
    sm = np.convolve(nov, kernel, mode="same")
    onsets: list[int] = []
    last = -10 ** 9
    above_prev = False
    for k in range(n):
        above = sm[k] > threshold
        if above and not above_prev:
            peak = k + int(np.argmax(nov[k : k + smooth]))
            if peak - last > refractory:
                onsets.append(peak)
                last = peak
        above_prev = above
    return [p / fps for p in onsets]


def desync(pred_times, true_times, window: float = 1.0, miss_penalty: float = 1.0) -> float:
    """Mean onset timing error with unit penalty per unmatched onset.

    Greedy globally-nearest matching within `window` seconds; the score is
    (sum of matched |dt| + penalty * unmatched) / (matches + unmatched).
    Two empty lists are perfectly in sync: 0.
    """
    preds = sorted(float(t) for t in pred_times)
    trues = sorted(float(t) for t in true_times)
    if not preds and not trues:
        return 0.0
    pairs = sorted(
        (abs(p - t), i, j)
        for i, p in enumerate(preds)
        for j, t in enumerate(trues)
        if abs(p - t) <= window
    )
    used_p: set[int] = set()
    used_t: set[int] = set()
    total = 0.0
    matches = 0
    for d, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        total += d
        matches += 1
    unmatched = (len(preds) - matches) + (len(trues) - matches)
    return (total + miss_penalty * unmatched) / (matches + unmatched)


# ---------------------------------------------------------------------------
# deterministic embedding / classifier providers


def _audio_stats(a0: torch.Tensor) -> np.ndarray:
    a = a0.detach().cpu().numpy().astype(np.float64)
    diff = np.abs(np.diff(a, axis=0)) if a.shape[0] > 1 else np.zeros_like(a[:1])
    return np.concatenate([a.mean(axis=0), a.std(axis=0), diff.mean(axis=0)])


class RandomProjectionEmbedder:
    """tanh of a fixed gaussian projection of clip summary statistics."""

    def __init__(self, name: str, seed: int, d_latent: int, d_emb: int = 16):
        self.name = name
        w = RngStream(seed, ("audio-emb", name)).normal(d_emb, 3 * d_latent)
        self.w = w / math.sqrt(3 * d_latent)

    def embed(self, a0: torch.Tensor) -> np.ndarray:
        return np.tanh(self.w @ _audio_stats(a0))


AUDIO_EMBEDDER_SEEDS = {"vgg": 101, "panns": 202, "passt": 303}


def audio_embedder(name: str, d_latent: int) -> RandomProjectionEmbedder:
    if name not in AUDIO_EMBEDDER_SEEDS:
        raise DomainError(f"unknown embedder {name!r}; registered: {sorted(AUDIO_EMBEDDER_SEEDS)}")
    return RandomProjectionEmbedder(name, AUDIO_EMBEDDER_SEEDS[name], d_latent)


class EnergyHistogramClassifier:
    """Posteriors from class-direction projections plus an energy histogram.

    The class channels respond to how much of the mean latent excess lies
    along each class direction; a seeded projection of the frame-energy
    histogram adds provider-specific coloring.
    """

    def __init__(self, name: str, seed: int, d_latent: int,
                 classes: tuple = DEFAULT_CLASSES, n_bins: int = 8):
        self.name = name
        self.classes = classes
        self.dirs = np.stack([class_audio_direction(c, d_latent) for c in classes])
        self.bins = np.linspace(0.0, 3.0, n_bins + 1)
        w = RngStream(seed, ("classifier", name)).normal(len(classes), n_bins)
        self.w_hist = 0.5 * w / math.sqrt(n_bins)

    def posterior(self, a0: torch.Tensor) -> np.ndarray:
        a = a0.detach().cpu().numpy().astype(np.float64)
        proj = self.dirs @ a.mean(axis=0)  # [k]
        rms = np.sqrt((a ** 2).mean(axis=1))
        hist, _ = np.histogram(rms, bins=self.bins)
        hist = hist / max(hist.sum(), 1)
        logits = 4.0 * proj + self.w_hist @ hist
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum()


CLASSIFIER_SEEDS = {"panns": 11, "passt": 22}


def audio_classifier(name: str, d_latent: int) -> EnergyHistogramClassifier:
    if name not in CLASSIFIER_SEEDS:
        raise DomainError(f"unknown classifier {name!r}; registered: {sorted(CLASSIFIER_SEEDS)}")
    return EnergyHistogramClassifier(name, CLASSIFIER_SEEDS[name], d_latent)


class JointEmbedder:
    """Paired audio/video embeddings on a shared 1-frame-per-second grid.

    Both sides map each 1 s window to class-activation channels plus an
    energy channel, so matched content and timing yields high cosine.
    """

    def __init__(self, d_latent: int, d_video: int, classes: tuple = DEFAULT_CLASSES):
        self.classes = classes
        self.audio_dirs = np.stack([class_audio_direction(c, d_latent) for c in classes])
        self.video_dirs = np.stack([
            class_video_pattern(c, d_video=d_video).mean(axis=0) for c in classes
        ])
        self.video_dirs /= np.linalg.norm(self.video_dirs, axis=1, keepdims=True)

    @staticmethod
    def _windows(n: int, rate: float):
        w = max(1, int(round(rate)))
        return [(s, min(s + w, n)) for s in range(0, n, w)]

    def embed_audio(self, a0: torch.Tensor, latent_fps: float) -> np.ndarray:
        a = a0.detach().cpu().numpy().astype(np.float64)
        rows = []
        for s, e in self._windows(a.shape[0], latent_fps):
            seg = a[s:e]
            rows.append(np.concatenate([
                self.audio_dirs @ seg.mean(axis=0),
                [np.sqrt((seg ** 2).mean())],
            ]))
        return np.stack(rows)

    def embed_video(self, frame_tokens: torch.Tensor, eff_fps: float) -> np.ndarray:
        v = frame_tokens.detach().cpu().numpy().astype(np.float64)
        rows = []
        for s, e in self._windows(v.shape[0], eff_fps):
            seg = v[s:e]
            rows.append(np.concatenate([
                self.video_dirs @ seg.mean(axis=0),
                [np.sqrt((seg ** 2).mean())],
            ]))
        return np.stack(rows)

def ib_score(audio_emb, frame_embs, pairing=None) -> float:
    """Mean cosine between each clip's audio embedding and its mean frame embedding.

    `audio_emb` is an EmbeddingSet (or [n, d] array) with one row per clip;
    `frame_embs` is a sequence of [k_i, d] frame-embedding matrices, one per
    clip, in the same order. `pairing` optionally names the clips for error
    messages. A zero-norm embedding on either side is a numeric error.
    """
    audio = _as_matrix(audio_emb, "embeddings")
    if audio.ndim != 2 or len(frame_embs) != audio.shape[0]:
        raise ShapeError("need one audio embedding row and one frame set per clip")
    names = list(pairing) if pairing is not None else list(range(audio.shape[0]))
    cos = []
    for i, frames in enumerate(frame_embs):
        f = np.asarray(frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] != audio.shape[1]:
            raise ShapeError(f"clip {names[i]}: frame embeddings must be [k>=1, d]")
        fmean = f.mean(axis=0)
        na, nf = np.linalg.norm(audio[i]), np.linalg.norm(fmean)
        if na == 0.0 or nf == 0.0:
            raise NumericError(f"zero-norm embedding for clip {names[i]}")
        cos.append(float(audio[i] @ fmean / (na * nf)))
    return float(np.mean(cos))


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    kl_panns: float
    kl_passt: float
    ib: float
    fd_vgg: float
    fd_panns: float
    fd_passt: float
    desync: float
    n_clips: int = 0
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"n_clips={self.n_clips}"]
        for key in sorted(self.extra):
            lines.append(f"{key}={self.extra[key]}")
        for key in EVAL_ROW_ORDER:
            lines.append(f"{key}={getattr(self, key):.6f}")
        header = " ".join(EVAL_ROW_LABELS)
        row = " ".join(f"{getattr(self, key):.4f}" for key in EVAL_ROW_ORDER)
        lines.append(f"columns={header}")
        lines.append(f"row={row}")
        return "\n".join(lines) + "\n"

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())


# ---------------------------------------------------------------------------
# end-to-end evaluation

REQUIRED_EMBEDDERS = ("vgg", "panns", "passt")
REQUIRED_CLASSIFIERS = ("panns", "passt")
KL_DIRECTION = "ref||gen"
DESYNC_PROXY = "onset-novelty-vs-generator-truth"


def default_providers(d_latent: int, d_video: int) -> dict:
    """The standard provider slate: three embedders, two classifiers, one joint."""
    return {
        "fd": {n: audio_embedder(n, d_latent) for n in REQUIRED_EMBEDDERS},
        "kl": {n: audio_classifier(n, d_latent) for n in REQUIRED_CLASSIFIERS},
        "ib": JointEmbedder(d_latent, d_video),
    }


def _check_providers(providers: dict) -> dict:
    missing = []
    for n in REQUIRED_EMBEDDERS:
        if n not in providers.get("fd", {}):
            missing.append(f"fd:{n}")
    for n in REQUIRED_CLASSIFIERS:
        if n not in providers.get("kl", {}):
            missing.append(f"kl:{n}")
    if providers.get("ib") is None:
        missing.append("ib")
    if missing:
        raise ConfigError(f"missing providers: {', '.join(missing)}")
    return providers


def eval_settings_hash(settings: dict) -> str:
    """Digest of canonicalized evaluation settings; any knob change shows."""
    lines = sorted(f"{k}={settings[k]}" for k in settings)
    return hashlib.sha256(("\n".join(lines) + "\n").encode("utf-8")).hexdigest()


def evaluate(backbone, bridge, records, corpus_dir: str, seed: int = 0,
             cfg_scale: float = 2.0, steps: int = 16, use_video: bool = True,
             no_text: bool = False, self_mode: bool = False, chunk: int = 8,
             pooling: PoolingSpec | None = None,
             providers: dict | None = None) -> EvalReport:
    """Generate audio for every record and score it against the references.

    Per-clip noise comes from (seed, clip_id) streams, so report bytes are
    a pure function of (weights, records, flags). `self_mode` scores the
    references against themselves, which pins the metric floor near zero.
    `no_text` drops prompts so conditioning is video-only; `use_video=False`
    drops the bridge instead.
    """
    if pooling is None:
        pooling = PoolingSpec()
    if not records:
        raise DomainError("evaluation needs at least one record")
    d_latent = backbone.config.d_model

    clips = [load_clip(corpus_dir, r) for r in records]
    d_video = clips[0].video.tokens.shape[-1]
    if providers is None:
        providers = default_providers(d_latent, d_video)
    _check_providers(providers)
    embedders = providers["fd"]
    classifiers = providers["kl"]
    joint: JointEmbedder = providers["ib"]
    frame_pool = PoolingSpec(mode="frame", max_duration_s=pooling.max_duration_s,
                             segment_s=pooling.segment_s)

    gens: list[torch.Tensor] = []
    if self_mode:
        gens = [c.a0 for c in clips]
    else:
        for start in range(0, len(clips), chunk):
            part = clips[start : start + chunk]
            b = len(part)
            s_a = part[0].s_a
            texts = [TextTokens.absent(backbone.config.d_text) if no_text
                     else encode_prompt(c.prompt, backbone.config.d_text) for c in part]
            vt = vp = pm = None
            br = None
            if use_video and bridge is not None:
                pooled = [pool_video(c.video, pooling) for c in part]
                vt = torch.stack([p.tokens for p in pooled]).to(torch.float32)
                vp = pooled[0].positions
                pm = torch.ones(b)
                br = bridge
            eps = np.stack([
                RngStream(seed, ("eval-gen", c.clip_id)).normal(s_a, d_latent)
                for c in part
            ])
            eps0 = torch.from_numpy(eps).to(torch.float32)
            out = sample_batch(backbone, br, texts, vt, vp, pm,
                               s_a=s_a, steps=steps, cfg_scale=cfg_scale, eps_init=eps0)
            gens.extend(out[i] for i in range(b))

    ref_emb = {n: np.stack([e.embed(c.a0) for c in clips]) for n, e in embedders.items()}
    gen_emb = {n: np.stack([e.embed(g) for g in gens]) for n, e in embedders.items()}
    fd = {n: frechet_distance(ref_emb[n], gen_emb[n]) for n in embedders}

    kl = {}
    for n, cl in classifiers.items():
        ref_p = np.stack([cl.posterior(c.a0) for c in clips])
        gen_p = np.stack([cl.posterior(g) for g in gens])
        kl[n] = mean_kl(ref_p, gen_p)

    audio_rows = []
    frame_rows = []
    ds_vals = []
    for c, g in zip(clips, gens):
        frame_tokens = pool_video(c.video, frame_pool)
        audio_rows.append(joint.embed_audio(g, c.latent_fps).mean(axis=0))
        frame_rows.append(joint.embed_video(frame_tokens.tokens, frame_tokens.eff_fps))
        pred = onset_detect(g, fps=c.latent_fps)
        ds_vals.append(desync(pred, c.onsets_s))
    ib = ib_score(EmbeddingSet(np.stack(audio_rows), provider_id="ib"),
                  frame_rows, pairing=[c.clip_id for c in clips])

    settings = {
        "cfg_scale": cfg_scale, "steps": steps, "seed": seed,
        "use_video": int(use_video), "no_text": int(no_text),
        "self_mode": int(self_mode), "pool_mode": pooling.mode,
        "kl_direction": KL_DIRECTION, "desync_proxy": DESYNC_PROXY,
        "providers": "fd:" + ",".join(sorted(embedders))
                     + "|kl:" + ",".join(sorted(classifiers)) + "|ib:joint-1s",
    }
    extra = dict(settings)
    extra["config_hash"] = eval_settings_hash(settings)
    return EvalReport(
        kl_panns=kl["panns"], kl_passt=kl["passt"], ib=ib,
        fd_vgg=fd["vgg"], fd_panns=fd["panns"], fd_passt=fd["passt"],
        desync=float(np.mean(ds_vals)), n_clips=len(clips),
        extra=extra,
    )
