"""Run configuration: a typed INI schema with content hashing.

Every key has a declared type and default; unknown sections or keys are
rejected rather than ignored, so a typo cannot silently fall back to a
default. Two hashes summarize a resolved config: `config_hash` covers
everything, `model_hash` only the architecture sections, which is what a
checkpoint must agree on to be loadable.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields

from .backbone import BackboneConfig
from .bridge import PoolingSpec
from .errors import ConfigError

_REQUIRED = object()

# section -> key -> (attribute, type, default)
SCHEMA = {
    "run": {
        "seed": ("run_seed", int, 0),
        "out_dir": ("out_dir", str, _REQUIRED),
    },
    "backbone": {
        "n_blocks": ("n_blocks", int, 6),
        "d_model": ("d_model", int, 64),
        "n_heads": ("n_heads", int, 4),
        "d_text": ("d_text", int, 32),
        "s_a_max": ("s_a_max", int, 256),
        "rope_base": ("rope_base", float, 10000.0),
        "out_gain": ("out_gain", float, 0.25),
        "init_seed": ("init_seed", int, 1),
    },
    "video": {
        "d_video": ("d_video", int, 16),
        "pool_mode": ("pool_mode", str, "frame"),
        "max_duration_s": ("max_duration_s", float, 12.0),
        "segment_s": ("segment_s", float, 4.0),
    },
    "train": {
        "corpus_dir": ("corpus_dir", str, _REQUIRED),
        "steps": ("steps", int, 1000),
        "batch_size": ("batch_size", int, 8),
        "lr": ("lr", float, 2e-3),
        "checkpoint_every": ("checkpoint_every", int, 500),
        "token_drop_p": ("token_drop_p", float, 0.10),
        "text_drop_p": ("text_drop_p", float, 0.0),
        "log_every": ("log_every", int, 50),
    },
    # One sampling step reads out the model's clean-latent estimate directly.
    # With a frozen random backbone the estimate cannot track the noisy input
    # across steps, so longer chains only re-inject starting noise; the single
    # step is where conditioning is visible.
    "eval": {
        "cfg_scale": ("eval_cfg_scale", float, 2.0),
        "steps": ("eval_steps", int, 1),
        "seed": ("eval_seed", int, 0),
    },
}

MODEL_SECTIONS = ("backbone", "video")

# Path-valued keys are deployment plumbing: two runs of the same experiment in
# different directories must agree on every hash, or resume and cross-machine
# report comparison would refuse configs that compute the same thing.
PATH_KEYS = {("run", "out_dir"), ("train", "corpus_dir")}


@dataclass
class RunConfig:
    run_seed: int = 0
    out_dir: str = ""
    n_blocks: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_text: int = 32
    s_a_max: int = 256
    rope_base: float = 10000.0
    out_gain: float = 0.25
    init_seed: int = 1
    d_video: int = 16
    pool_mode: str = "frame"
    max_duration_s: float = 12.0
    segment_s: float = 4.0
    corpus_dir: str = ""
    steps: int = 1000
    batch_size: int = 8
    lr: float = 2e-3
    checkpoint_every: int = 500
    token_drop_p: float = 0.10
    text_drop_p: float = 0.0
    log_every: int = 50
    eval_cfg_scale: float = 2.0
    eval_steps: int = 1
    eval_seed: int = 0

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            n_blocks=self.n_blocks, d_model=self.d_model, n_heads=self.n_heads,
            d_text=self.d_text, s_a_max=self.s_a_max, rope_base=self.rope_base,
            out_gain=self.out_gain,
        ).validate()

    def pooling_spec(self) -> PoolingSpec:
        return PoolingSpec(mode=self.pool_mode, max_duration_s=self.max_duration_s,
                           segment_s=self.segment_s).validate()

    def validate(self) -> "RunConfig":
        self.backbone_config()
        self.pooling_spec()
        if not self.out_dir:
            raise ConfigError("run.out_dir is required")
        if not self.corpus_dir:
            raise ConfigError("train.corpus_dir is required")
        if self.steps < 1 or self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("steps, batch_size, checkpoint_every must be >= 1")
        if not 0.0 <= self.token_drop_p < 1.0 or not 0.0 <= self.text_drop_p < 1.0:
            raise ConfigError("drop probabilities must lie in [0, 1)")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.eval_steps < 1:
            raise ConfigError("eval.steps must be >= 1")
        return self


def _coerce(section: str, key: str, typ, raw: str):
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(path: str) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    cfg = RunConfig()
    seen_required = set()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; expected one of {sorted(SCHEMA[section])}"
                )
            attr, typ, _default = SCHEMA[section][key]
            setattr(cfg, attr, _coerce(section, key, typ, raw))
            seen_required.add((section, key))
    for section, keys in SCHEMA.items():
        for key, (attr, _typ, default) in keys.items():
            if default is _REQUIRED and (section, key) not in seen_required:
                raise ConfigError(f"missing required key {key!r} in [{section}]")
    return cfg.validate()


def config_lines(cfg: RunConfig, sections=None) -> list[str]:
    """Canonical sorted section.key=value lines for hashing."""
    lines = []
    for section, keys in SCHEMA.items():
        if sections is not None and section not in sections:
            continue
        for key, (attr, _typ, _default) in keys.items():
            if (section, key) in PATH_KEYS:
                continue
            lines.append(f"{section}.{key}={getattr(cfg, attr)}")
    return sorted(lines)


def config_hash(cfg: RunConfig) -> str:
    payload = "\n".join(config_lines(cfg)) + "\n"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def model_hash(cfg: RunConfig) -> str:
    payload = "\n".join(config_lines(cfg, sections=MODEL_SECTIONS)) + "\n"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def config_to_dict(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}


def config_from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    for f in fields(RunConfig):
        if f.name in d:
            setattr(cfg, f.name, d[f.name])
    return cfg
