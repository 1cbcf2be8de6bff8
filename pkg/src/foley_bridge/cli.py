"""Command-line interface.

Subcommands: gen-data, curate, train, sample, eval. Exit codes: 0 on
success, 2 for configuration/usage/domain errors, 3 when a checkpoint is
incompatible with the requested configuration. Thread use is capped via
FOLEY_BRIDGE_THREADS (default 1) before torch does any work.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

from .errors import FoleyBridgeError, IncompatibilityError

USAGE_ERRORS = 2
INCOMPATIBLE = 3


def _setup_threads():
    import torch

    n = int(os.environ.get("FOLEY_BRIDGE_THREADS", "1"))
    torch.set_num_threads(max(1, n))


def cmd_gen_data(args) -> int:
    from .synthdata import gen_corpus

    records = gen_corpus(args.n, args.seed, args.out, duration=args.duration)
    n_train = sum(1 for r in records if r.split == "train")
    print(f"wrote {len(records)} clips ({n_train} train, {len(records) - n_train} val) "
          f"to {args.out}")
    print(os.path.join(args.out, "manifest.jsonl"))
    return 0


def cmd_train(args) -> int:
    from .config import parse_config
    from .trainer import train_run

    cfg = parse_config(args.config)
    summary = train_run(cfg, resume_path=args.resume)
    print(f"trained to step {summary['final_step']}, last loss {summary['last_loss']:.6f}")
    for path in summary["checkpoints"]:
        print(path)
    return 0


def cmd_sample(args) -> int:
    import torch

    from .backbone import TextTokens, encode_prompt
    from .bridge import RawVideoTokens, pool_video
    from .config import config_from_dict
    from .diffusion import sample
    from .errors import DomainError
    from .tensorio import load_tensors, save_tensors
    from .trainer import models_from_checkpoint

    if args.steps < 1:
        raise DomainError(f"--steps must be >= 1, got {args.steps}")
    backbone, bridge, meta = models_from_checkpoint(args.checkpoint)
    cfg = config_from_dict(meta["config"])
    text = encode_prompt(args.prompt, cfg.d_text) if args.prompt else \
        TextTokens.absent(cfg.d_text)

    video = None
    latent_fps = 8.0
    s_a = args.frames
    if args.clip:
        tensors, clip_meta = load_tensors(args.clip)
        raw = RawVideoTokens(tokens=torch.from_numpy(tensors["video"]),
                             fps=float(clip_meta["fps"]),
                             stride=int(clip_meta.get("stride", 2)))
        video = pool_video(raw, cfg.pooling_spec())
        latent_fps = float(clip_meta["latent_fps"])
        s_a = int(round(float(clip_meta["duration"]) * latent_fps))

    latents = sample(backbone, bridge, text, video, n_steps=args.steps,
                     cfg_scale=args.cfg_scale, rng=args.seed, s_a=s_a)
    save_tensors(args.out, {"a0": latents.tokens}, meta={
        "kind": "generated-latents",
        "prompt": args.prompt,
        "clip": os.path.basename(args.clip) if args.clip else "",
        "cfg_scale": args.cfg_scale,
        "steps": args.steps,
        "seed": args.seed,
        "latent_fps": latent_fps,
        "model_hash": meta["model_hash"],
    })
    print(args.out)
    if args.render:
        from .render import render_wav

        render_wav(latents.tokens, latent_fps, args.render)
        print(args.render)
    return 0


def cmd_eval(args) -> int:
    from .config import config_from_dict
    from .curation import read_manifest
    from .evalsuite import evaluate
    from .trainer import models_from_checkpoint

    backbone, bridge, meta = models_from_checkpoint(args.checkpoint)
    cfg = config_from_dict(meta["config"])
    corpus_dir = args.corpus_dir or os.path.dirname(os.path.abspath(args.manifest))
    records = [r for r in read_manifest(args.manifest) if r.live]
    if args.split != "all":
        records = [r for r in records if r.split == args.split]
    # Flags left unset fall back to the eval settings baked into the run config.
    seed = cfg.eval_seed if args.seed is None else args.seed
    cfg_scale = cfg.eval_cfg_scale if args.cfg_scale is None else args.cfg_scale
    steps = cfg.eval_steps if args.steps is None else args.steps
    report = evaluate(
        backbone, bridge, records, corpus_dir, seed=seed,
        cfg_scale=cfg_scale, steps=steps,
        use_video=not args.no_video, no_text=args.no_text,
        self_mode=args.gt_self, pooling=cfg.pooling_spec(),
    )
    report.write(args.out)
    print(report.to_text(), end="")
    return 0


def cmd_curate(args) -> int:
    from .curation import curate, read_manifest, write_manifest

    parser = configparser.ConfigParser()
    if not parser.read(args.pipeline_config):
        raise FoleyBridgeError(f"cannot read pipeline config {args.pipeline_config!r}")
    pipeline = [(section, dict(parser.items(section))) for section in parser.sections()]
    records = read_manifest(args.manifest)
    corpus_dir = args.corpus_dir or os.path.dirname(os.path.abspath(args.manifest))
    annotated, report = curate(records, pipeline, corpus_dir=corpus_dir)
    write_manifest(args.out, annotated)
    with open(args.out + ".report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for st in report["stages"]:
        print(f"{st['stage']}: in={st['in_count']} kept={st['kept']} dropped={st['dropped']}")
    print(f"final: {report['final']} of {report['initial']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foley-bridge",
                                description="video-synchronized audio bridge toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic paired corpus")
    g.add_argument("--n", type=int, required=True, help="number of clips (>= 2)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="corpus output directory")
    g.add_argument("--duration", type=float, default=4.0, help="clip length in seconds")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the bridge per an INI config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate latents from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--clip", default=None, help="clip blob to condition on")
    s.add_argument("--prompt", default="")
    s.add_argument("--cfg-scale", type=float, default=2.0)
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=32,
                   help="latent frames when no --clip is given")
    s.add_argument("--out", required=True, help="output latent blob path")
    s.add_argument("--render", default=None, help="also write a WAV here")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score generations against a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="report text path")
    e.add_argument("--corpus-dir", default=None)
    e.add_argument("--split", default="val", choices=["train", "val", "all"])
    e.add_argument("--seed", type=int, default=None,
                   help="defaults to the run config's eval seed")
    e.add_argument("--cfg-scale", type=float, default=None,
                   help="defaults to the run config's eval guidance scale")
    e.add_argument("--steps", type=int, default=None,
                   help="defaults to the run config's eval step count")
    e.add_argument("--no-text", action="store_true", help="drop prompts (video-only)")
    e.add_argument("--no-video", action="store_true", help="drop the bridge")
    e.add_argument("--gt-self", action="store_true",
                   help="score references against themselves")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("curate", help="filter a manifest through a stage pipeline")
    c.add_argument("--manifest", required=True)
    c.add_argument("--pipeline-config", required=True)
    c.add_argument("--out", required=True, help="curated manifest path")
    c.add_argument("--corpus-dir", default=None)
    c.set_defaults(func=cmd_curate)
    return p


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IncompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INCOMPATIBLE
    except (FoleyBridgeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERRORS


if __name__ == "__main__":
    sys.exit(main())
