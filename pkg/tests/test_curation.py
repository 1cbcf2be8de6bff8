import json
import math
import os
from dataclasses import asdict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foley_bridge.curation import (
    STAGES,
    ClipRecord,
    CurationContext,
    ScorerSpec,
    active_fraction,
    curate,
    read_manifest,
    score_filter,
    silence_filter,
    write_manifest,
)
from foley_bridge.errors import ConfigError, InputError, ManifestError
from foley_bridge.synthdata import gen_clip


def _rec(i, label="thud", n_events=None, **kw):
    meta = {} if n_events is None else {"n_events": n_events}
    return ClipRecord(clip_id=f"clip{i:04d}", label=label, prompt=label,
                      split="train", path=f"clips/clip{i:04d}.bin",
                      duration=4.0, meta=meta, **kw)


# ---------------------------------------------------------------------------
# records and manifests


def test_record_validation():
    with pytest.raises(ManifestError):
        _rec(0, status="weird")
    with pytest.raises(ManifestError):
        ClipRecord(clip_id="x", label="a", prompt="a", split="train",
                   path="p", duration=0.0)
    with pytest.raises(ManifestError):
        _rec(0, status="dropped")  # no reason
    r = _rec(0, status="dropped", drop_reason="silence")
    assert not r.live
    assert _rec(1).live


def test_manifest_roundtrip(tmp_path):
    path = str(tmp_path / "m.jsonl")
    records = [_rec(0), _rec(1, status="dropped", drop_reason="silence"),
               _rec(2, status="kept")]
    records[2].scores["peak_rms"] = 0.5
    write_manifest(path, records)
    back = read_manifest(path)
    assert [asdict(r) for r in back] == [asdict(r) for r in records]


def test_manifest_defaults_for_missing_optionals(tmp_path):
    path = str(tmp_path / "m.jsonl")
    minimal = {"clip_id": "a", "label": "x", "prompt": "x", "split": "train",
               "path": "p", "duration": 1.0}
    with open(path, "w") as fh:
        fh.write(json.dumps(minimal) + "\n")
    r, = read_manifest(path)
    assert r.status == "pending" and r.scores == {} and r.meta == {}


def test_manifest_rejects_duplicates(tmp_path):
    path = str(tmp_path / "m.jsonl")
    with pytest.raises(ManifestError, match="duplicate"):
        write_manifest(path, [_rec(0), _rec(0)])
    write_manifest(path, [_rec(0)])
    with open(path, "a") as fh:
        fh.write(json.dumps(asdict(_rec(0))) + "\n")
    with pytest.raises(ManifestError, match="duplicate"):
        read_manifest(path)


def test_manifest_rejects_bad_lines(tmp_path):
    path = str(tmp_path / "m.jsonl")
    with open(path, "w") as fh:
        fh.write("{not json\n")
    with pytest.raises(ManifestError, match="invalid JSON"):
        read_manifest(path)
    with open(path, "w") as fh:
        fh.write(json.dumps({"clip_id": "a", "label": "x"}) + "\n")
    with pytest.raises(ManifestError, match="missing fields"):
        read_manifest(path)


# ---------------------------------------------------------------------------
# silence filtering


def test_silence_all_zeros_dropped():
    assert silence_filter(np.zeros(16000), 16000.0) is False


def test_silence_quiet_sine_kept():
    # 50 Hz at 16 kHz: 5 whole cycles per 100 ms window, RMS = 0.1/sqrt(2)
    t = np.arange(16000) / 16000.0
    x = 0.1 * np.sin(2 * math.pi * 50.0 * t)
    rms = float(np.sqrt(np.mean(x[:1600] ** 2)))
    assert abs(rms - 0.1 / math.sqrt(2)) < 1e-4
    assert silence_filter(x, 16000.0) is True
    assert active_fraction(x, 16000.0) == 1.0


def test_silence_short_burst_dropped():
    # 10 s at 100 Hz -> 100 windows of 0.1 s; a 0.2 s burst lights exactly 2
    x = np.zeros(1000)
    x[100:120] = 1.0
    assert active_fraction(x, 100.0) == 0.02
    assert silence_filter(x, 100.0, min_active_fraction=0.05) is False


def test_silence_validation():
    with pytest.raises(InputError):
        active_fraction(np.zeros(0), 100.0)
    with pytest.raises(InputError):
        silence_filter(np.ones(10), 100.0, rms_threshold=0.0)
    with pytest.raises(InputError):
        silence_filter(np.ones(10), 100.0, min_active_fraction=-0.1)


def test_active_fraction_counts_trailing_partial_window():
    x = np.ones(105)
    x[:50] = 0.0
    # 100 Hz, 0.1 s windows: 10 full + 1 partial of 5 samples = 11 windows
    assert active_fraction(x, 100.0) == pytest.approx(6 / 11)


# ---------------------------------------------------------------------------
# scorers


def test_scorer_spec_validation():
    with pytest.raises(ConfigError):
        ScorerSpec("x", 0.5, direction="sideways").validate()
    above = ScorerSpec("x", 0.5, direction="keep_above")
    below = ScorerSpec("x", 0.5, direction="keep_below")
    assert above.keeps(0.5) and above.keeps(0.9) and not above.keeps(0.4)
    assert below.keeps(0.5) and below.keeps(0.1) and not below.keeps(0.6)


def test_score_filter_mixed_scores():
    records = [_rec(i) for i in range(3)]
    values = {"clip0000": 0.2, "clip0001": 0.6, "clip0002": 0.9}
    spec = ScorerSpec("toy", 0.5, "keep_above")
    out = score_filter(records, spec, lambda r, ctx: values[r.clip_id])
    dropped = [r for r in out if not r.live]
    assert len(dropped) == 1 and dropped[0].clip_id == "clip0000"
    assert dropped[0].drop_reason == "toy"
    # audit trail: scores recorded on kept AND dropped records
    assert all(r.scores["toy"] == values[r.clip_id] for r in out)


def test_score_filter_vacuous_and_total():
    records = [_rec(i) for i in range(3)]
    score_filter(records, ScorerSpec("t", -1.0, "keep_above"), lambda r, c: 0.5)
    assert all(r.live for r in records)
    score_filter(records, ScorerSpec("t", 2.0, "keep_above"), lambda r, c: 0.5)
    assert all(not r.live for r in records)


def test_score_filter_scorer_error_drops_and_continues():
    records = [_rec(0), _rec(1)]

    def flaky(r, ctx):
        if r.clip_id == "clip0000":
            raise ValueError("boom")
        return 1.0

    score_filter(records, ScorerSpec("toy", 0.5, "keep_above"), flaky)
    assert records[0].drop_reason == "scorer_error:toy"
    assert "toy" not in records[0].scores
    assert records[1].live and records[1].scores["toy"] == 1.0


def test_score_filter_skips_dropped():
    records = [_rec(0, status="dropped", drop_reason="earlier"), _rec(1)]
    score_filter(records, ScorerSpec("toy", 0.5, "keep_above"), lambda r, c: 1.0)
    assert records[0].scores == {} and records[0].drop_reason == "earlier"


# ---------------------------------------------------------------------------
# pipeline


def test_curate_empty_pipeline_is_identity():
    records = [_rec(i) for i in range(4)]
    out, report = curate(records, [])
    assert all(r.status == "kept" for r in out)
    assert report == {"initial": 4, "final": 4, "dropped": 0, "stages": []}


def test_curate_rejects_duplicates_and_unknown_stage():
    with pytest.raises(ManifestError, match="duplicate"):
        curate([_rec(0), _rec(0)], [])
    with pytest.raises(ConfigError, match="unknown stage 'bogus'"):
        curate([_rec(0)], [("bogus", {})])
    # the error message lists what is registered
    with pytest.raises(ConfigError, match="label"):
        curate([_rec(0)], [("bogus", {})])


def test_curate_label_stage_and_bookkeeping():
    records = [_rec(i, label=l) for i, l in
               enumerate(["thud", "clink", "thud", "splash"])]
    out, report = curate(records, [("label", {"keep": "thud"})])
    assert [r.live for r in out] == [True, False, True, False]
    assert all(r.drop_reason == "label" for r in out if not r.live)
    stage, = report["stages"]
    assert stage["in_count"] == 4 and stage["kept"] == 2 and stage["dropped"] == 2
    assert report["final"] == 2 and report["dropped"] == 2


def test_curate_stage_drops_sum_to_total():
    records = [_rec(i, label=("thud" if i % 2 else "clink"), n_events=i % 4)
               for i in range(12)]
    pipeline = [("label", {"keep": "thud,clink"}),
                ("score", {"scorer": "event_count", "threshold": 2,
                           "direction": "keep_above"})]
    out, report = curate(records, pipeline)
    assert sum(s["dropped"] for s in report["stages"]) == report["dropped"]
    for s in report["stages"]:
        assert s["in_count"] == s["kept"] + s["dropped"]


def test_curate_idempotent():
    records = [_rec(i, n_events=i % 4) for i in range(10)]
    pipeline = [("score", {"scorer": "event_count", "threshold": 2,
                           "direction": "keep_above"})]
    out, first = curate(records, pipeline)
    statuses = [(r.status, r.drop_reason) for r in out]
    out2, second = curate(out, pipeline)
    assert [(r.status, r.drop_reason) for r in out2] == statuses
    assert second["dropped"] == first["dropped"]
    assert all(s["dropped"] == 0 for s in second["stages"])


def test_stage_param_validation():
    with pytest.raises(ConfigError, match="unknown scorer"):
        curate([_rec(0)], [("score", {"scorer": "nope"})])
    with pytest.raises(ConfigError, match="keep"):
        curate([_rec(0)], [("label", {})])
    assert sorted(STAGES) == ["label", "score", "silence"]


def test_silence_stage_on_synthetic_clips():
    """Raising the RMS floor separates event clips from floor-only clips.

    At threshold 0.1 only frames inside an event envelope count as active
    (event rows have RMS ~0.3-0.4, the noise floor ~0.05), so a clip with no
    events has zero active fraction.
    """
    quiet = gen_clip(21, n_events=0)
    loud = gen_clip(22, n_events=2)
    records = [_rec(0), _rec(1)]
    ctx = CurationContext(corpus_dir="unused")
    ctx._cache = {"clip0000": quiet, "clip0001": loud}
    out, report = curate(records, [("silence", {"rms_threshold": 0.1})], ctx=ctx)
    assert not out[0].live and out[0].drop_reason == "silence"
    assert out[1].live


def test_curate_on_disk_corpus(tiny_corpus):
    corpus_dir, _ = tiny_corpus
    records = read_manifest(os.path.join(corpus_dir, "manifest.jsonl"))
    pipeline = [("silence", {}),
                ("score", {"scorer": "event_count", "threshold": 3,
                           "direction": "keep_above"})]
    out, report = curate(records, pipeline, corpus_dir=corpus_dir)
    assert report["initial"] == len(records)
    # every generated clip clears the default silence gate (floor RMS 0.05)
    assert report["stages"][0]["dropped"] == 0
    for r in out:
        assert r.scores["event_count"] == r.meta["n_events"]
        assert r.live == (r.meta["n_events"] >= 3)


# ---------------------------------------------------------------------------
# pipeline properties


@settings(max_examples=40, deadline=None)
@given(
    labels=st.lists(st.sampled_from(["thud", "clink", "splash"]),
                    min_size=1, max_size=20),
    events=st.data(),
    threshold=st.integers(0, 4),
    keep=st.sets(st.sampled_from(["thud", "clink", "splash"]), min_size=1),
)
def test_curate_properties(labels, events, threshold, keep):
    ns = [events.draw(st.integers(0, 3)) for _ in labels]
    records = [_rec(i, label=l, n_events=n) for i, (l, n) in enumerate(zip(labels, ns))]
    pipeline = [("label", {"keep": ",".join(sorted(keep))}),
                ("score", {"scorer": "event_count", "threshold": threshold,
                           "direction": "keep_above"})]
    out, report = curate(records, pipeline)
    # conservation at every stage, monotone live set, exact final predicate
    for s in report["stages"]:
        assert s["in_count"] == s["kept"] + s["dropped"]
    assert report["initial"] == len(labels)
    assert report["final"] == sum(
        1 for l, n in zip(labels, ns) if l in keep and n >= threshold)
    out2, second = curate(out, pipeline)
    # top-level "dropped" counts all non-live records, stages count new drops
    assert second["dropped"] == report["dropped"]
    assert all(s["dropped"] == 0 for s in second["stages"])
    assert [r.status for r in out2] == [r.status for r in out]
