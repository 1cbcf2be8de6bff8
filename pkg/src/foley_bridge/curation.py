"""Dataset curation: manifests and ordered filtering stages.

A manifest is JSONL, one clip record per line. Curation runs a pipeline of
named stages over the record list; a stage only ever marks still-live
records as dropped (with a reason) or leaves them alone, so pipelines are
monotone, conserve kept+dropped counts, and are idempotent on their own
output. Scores are recorded on every record a scorer saw, kept or not.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ManifestError, ConfigError, InputError

STATUSES = ("pending", "kept", "dropped")


@dataclass
class ClipRecord:
    clip_id: str
    label: str
    prompt: str
    split: str
    path: str
    duration: float
    meta: dict = field(default_factory=dict)
    status: str = "pending"
    drop_reason: str | None = None
    scores: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ManifestError(f"{self.clip_id}: unknown status {self.status!r}")
        if self.duration <= 0:
            raise ManifestError(f"{self.clip_id}: duration must be positive")
        if self.status == "dropped" and not self.drop_reason:
            raise ManifestError(f"{self.clip_id}: dropped records need a drop_reason")

    @property
    def live(self) -> bool:
        return self.status != "dropped"


def write_manifest(path: str, records: list[ClipRecord]) -> None:
    seen = set()
    for r in records:
        if r.clip_id in seen:
            raise ManifestError(f"duplicate clip_id {r.clip_id!r}")
        seen.add(r.clip_id)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_manifest(path: str) -> list[ClipRecord]:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            missing = {"clip_id", "label", "prompt", "split", "path", "duration"} - set(obj)
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if obj["clip_id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate clip_id {obj['clip_id']!r}")
            seen.add(obj["clip_id"])
            records.append(ClipRecord(
                clip_id=obj["clip_id"], label=obj["label"], prompt=obj["prompt"],
                split=obj["split"], path=obj["path"], duration=float(obj["duration"]),
                meta=obj.get("meta", {}),
                status=obj.get("status", "pending"),
                drop_reason=obj.get("drop_reason"),
                scores=obj.get("scores", {}),
            ))
    return records


# ---------------------------------------------------------------------------
# primitive predicates


def active_fraction(signal: np.ndarray, sample_rate: float,
                    window_s: float = 0.1, rms_threshold: float = 1e-3) -> float:
    """Fraction of fixed-length windows whose RMS exceeds the threshold.

    Windows are non-overlapping, at least one sample long; a trailing
    partial window counts as a window.
    """
    x = np.asarray(signal, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise InputError("empty waveform")
    w = max(1, int(round(window_s * sample_rate)))
    active = 0
    total = 0
    for start in range(0, x.size, w):
        chunk = x[start : start + w]
        total += 1
        if np.sqrt(np.mean(chunk ** 2)) > rms_threshold:
            active += 1
    return active / total


def silence_filter(waveform: np.ndarray, sample_rate: float,
                   rms_threshold: float = 1e-3,
                   min_active_fraction: float = 0.05,
                   window_s: float = 0.1) -> bool:
    """True when the signal is active enough to keep.

    Keep iff the fraction of `window_s` windows with RMS above
    `rms_threshold` exceeds `min_active_fraction`.
    """
    if rms_threshold <= 0 or min_active_fraction <= 0:
        raise InputError("silence thresholds must be positive")
    return active_fraction(waveform, sample_rate, window_s=window_s,
                           rms_threshold=rms_threshold) > min_active_fraction


# ---------------------------------------------------------------------------
# scorers


@dataclass(frozen=True)
class ScorerSpec:
    scorer_id: str
    threshold: float
    direction: str = "keep_above"

    def validate(self) -> "ScorerSpec":
        if self.direction not in ("keep_above", "keep_below"):
            raise ConfigError(
                f"direction must be keep_above or keep_below, got {self.direction!r}")
        return self

    def keeps(self, value: float) -> bool:
        if self.direction == "keep_above":
            return value >= self.threshold
        return value <= self.threshold


class CurationContext:
    """Shared state for a pipeline run: a cached clip loader."""

    def __init__(self, corpus_dir: str | None = None):
        self.corpus_dir = corpus_dir
        self._cache: dict[str, object] = {}

    def load(self, record: ClipRecord):
        if self.corpus_dir is None:
            raise ConfigError("this stage needs clip audio; pass the corpus directory")
        if record.clip_id not in self._cache:
            from .synthdata import load_clip

            self._cache[record.clip_id] = load_clip(self.corpus_dir, record)
        return self._cache[record.clip_id]


def _frame_rms(clip) -> np.ndarray:
    a = clip.a0.numpy()
    return np.sqrt((a ** 2).mean(axis=1))


def scorer_event_count(record: ClipRecord, ctx: CurationContext) -> float:
    if "n_events" in record.meta:
        return float(record.meta["n_events"])
    return float(len(ctx.load(record).event_frames))


def scorer_peak_rms(record: ClipRecord, ctx: CurationContext) -> float:
    return float(_frame_rms(ctx.load(record)).max())


SCORERS = {
    "event_count": scorer_event_count,
    "peak_rms": scorer_peak_rms,
}


def score_filter(records: list[ClipRecord], spec: ScorerSpec, scorer,
                 ctx: CurationContext | None = None) -> list[ClipRecord]:
    """Threshold one scorer over all live records.

    Every scored record keeps its value in `scores` (kept or dropped, for
    audit); failures drop the record with reason "scorer_error:<id>" and the
    run continues.
    """
    spec.validate()
    if ctx is None:
        ctx = CurationContext()
    for r in records:
        if not r.live:
            continue
        try:
            value = float(scorer(r, ctx))
        except Exception:
            r.status = "dropped"
            r.drop_reason = f"scorer_error:{spec.scorer_id}"
            continue
        r.scores[spec.scorer_id] = value
        if not spec.keeps(value):
            r.status = "dropped"
            r.drop_reason = spec.scorer_id
    return records


# ---------------------------------------------------------------------------
# stages


def stage_silence(records, params: dict, ctx: CurationContext):
    rms_threshold = float(params.get("rms_threshold", 1e-3))
    min_active = float(params.get("min_active_fraction", 0.05))
    window_s = float(params.get("window_s", 0.1))
    for r in records:
        if not r.live:
            continue
        clip = ctx.load(r)
        if not silence_filter(_frame_rms(clip), clip.latent_fps,
                              rms_threshold=rms_threshold,
                              min_active_fraction=min_active, window_s=window_s):
            r.status = "dropped"
            r.drop_reason = "silence"
    return records


def stage_score(records, params: dict, ctx: CurationContext):
    name = str(params.get("scorer"))
    if name not in SCORERS:
        raise ConfigError(f"unknown scorer {name!r}; registered: {sorted(SCORERS)}")
    spec = ScorerSpec(
        scorer_id=name,
        threshold=float(params.get("threshold", "-inf")),
        direction=str(params.get("direction", "keep_above")),
    ).validate()
    return score_filter(records, spec, SCORERS[name], ctx)


def stage_label(records, params: dict, ctx: CurationContext):
    raw = params.get("keep", "")
    allow = {s.strip() for s in str(raw).split(",") if s.strip()}
    if not allow:
        raise ConfigError("label stage needs a nonempty 'keep' list")
    for r in records:
        if r.live and r.label not in allow:
            r.status = "dropped"
            r.drop_reason = "label"
    return records


STAGES = {
    "silence": stage_silence,
    "score": stage_score,
    "label": stage_label,
}


def curate(records: list[ClipRecord], pipeline: list[tuple[str, dict]],
           corpus_dir: str | None = None, ctx: CurationContext | None = None):
    """Run stages in order over still-live records; returns (records, report).

    All input records come back, annotated: survivors as "kept", the rest
    as "dropped" with a reason. Already-dropped inputs are never revisited,
    so running a pipeline on its own output drops nothing new.
    """
    if ctx is None:
        ctx = CurationContext(corpus_dir)
    seen = set()
    for r in records:
        if r.clip_id in seen:
            raise ManifestError(f"duplicate clip_id {r.clip_id!r}")
        seen.add(r.clip_id)
    for name, _ in pipeline:
        if name not in STAGES:
            raise ConfigError(f"unknown stage {name!r}; registered: {sorted(STAGES)}")
    stage_reports = []
    for name, params in pipeline:
        in_count = sum(1 for r in records if r.live)
        records = STAGES[name](records, params, ctx)
        if len(records) != len(seen) or {r.clip_id for r in records} != seen:
            raise ManifestError(f"stage {name!r} changed the record set")
        kept = sum(1 for r in records if r.live)
        stage_reports.append({
            "stage": name,
            "params": {k: str(v) for k, v in sorted(params.items())},
            "in_count": in_count,
            "kept": kept,
            "dropped": in_count - kept,
        })
    for r in records:
        if r.live:
            r.status = "kept"
    final = sum(1 for r in records if r.live)
    report = {
        "initial": len(records),
        "final": final,
        "dropped": len(records) - final,
        "stages": stage_reports,
    }
    return records, report
