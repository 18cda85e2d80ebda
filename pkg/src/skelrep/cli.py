"""Command-line entry point: ``skelrep {synth,pretrain,eval,inspect}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or
checkpoint error, 3 numerical failure. ``SKELREP_WORKERS`` sets the
number of torch threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import torch

from . import evaluation as E
from .archive import ArchiveError, read_archive, write_archive, write_untrimmed_archive
from .config import ConfigError, TrainConfig, apply_overrides, config_hash, load_config
from .model import EncoderBundle, count_parameters
from .skeleton import (ParseError, SkeletonSequence, SyntheticSpec, generate_synthetic, generate_untrimmed,
                       normalize)
from .trainer import CheckpointError, NumericalError, load_checkpoint, read_checkpoint, run_pretraining

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
TASKS = ("linear", "retrieval", "detect", "occluded", "fewshot")
WORKERS_ENV = "SKELREP_WORKERS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 by default; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# data helpers


def _archive_path(path: str, default_name: str) -> Path:
    p = Path(path)
    return p / default_name if p.is_dir() else p


def load_split(path: str, default_name: str = "train.skl") -> list:
    """Load an archive (or ``dir/default_name``); trimmed samples are root-centred."""
    samples = read_archive(_archive_path(path, default_name))["samples"]
    return [normalize(s) if isinstance(s, SkeletonSequence) else s for s in samples]


def _require_trimmed(samples, what: str):
    if not samples or not isinstance(samples[0], SkeletonSequence):
        raise E.EvalError(f"{what} must be a trimmed (per-sample label) archive")
    return samples


def _require_untrimmed(samples, what: str):
    if not samples or isinstance(samples[0], SkeletonSequence):
        raise E.EvalError(f"{what} must be an untrimmed archive with per-frame labels")
    return samples


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> dict:
    if args.classes < 2:
        raise UsageError("--classes must be >= 2")
    if args.per_class < 2:
        raise UsageError("--per-class must be >= 2 (one train and one test sample per class)")
    if args.heldout == 1 or args.heldout < 0:
        raise UsageError("--heldout must be 0 or >= 2")
    spec = SyntheticSpec(num_classes=args.classes, samples_per_class=args.per_class, num_frames=args.frames,
                         num_joints=args.joints, noise_sigma=args.noise, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_synthetic(spec)
    summary: dict[str, Any] = {"classes": spec.num_classes, "frames": spec.num_frames, "seed": spec.seed,
                               "files": {}}
    for name in ("train", "test"):
        part = manifest.subset("default", name)
        write_archive(out / f"{name}.skl", part, spec.num_classes, {"seed": spec.seed, "split": name})
        summary["files"][f"{name}.skl"] = len(part)
    if args.heldout:
        held_spec = dataclasses.replace(spec, num_classes=args.heldout, class_offset=args.classes)
        held = generate_synthetic(held_spec).samples
        write_archive(out / "heldout.skl", held, args.heldout, {"seed": spec.seed, "class_offset": args.classes})
        summary["files"]["heldout.skl"] = len(held)
    if args.untrimmed:
        for name, seed_tag in (("untrimmed_train", 0), ("untrimmed_test", 1)):
            seqs = generate_untrimmed(spec, args.untrimmed, seed=spec.seed * 1000 + 17 + seed_tag)
            write_untrimmed_archive(out / f"{name}.skl", seqs, spec.num_classes, {"seed": spec.seed})
            summary["files"][f"{name}.skl"] = len(seqs)
    summary["samples"] = sum(summary["files"][f"{n}.skl"] for n in ("train", "test"))
    return summary


# ---------------------------------------------------------------------------
# pretrain


def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(args) -> TrainConfig:
    """Defaults < stored checkpoint config (on resume) < config file < flags."""
    if args.config:
        cfg = load_config(args.config)
    elif args.resume:
        cfg = TrainConfig.from_dict(read_checkpoint(args.resume)["config"])
    else:
        cfg = TrainConfig()
    overrides = _parse_set(args.set)
    overrides.update({"seed": args.seed, "epochs_joint": args.epochs_joint, "epochs_post": args.epochs_post,
                      "batch_size": args.batch_size, "lr": args.lr, "train_data": args.data,
                      "out_dir": args.out})
    try:
        return apply_overrides(cfg, overrides)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad override: {exc}") from exc


def cmd_pretrain(args) -> dict:
    cfg = resolve_config(args)
    if not cfg.train_data:
        raise UsageError("no training data: pass --data or set train_data in the config")
    samples = _require_trimmed(load_split(cfg.train_data, "train.skl"), "training data")
    last = run_pretraining(cfg, samples, out_dir=cfg.out_dir, resume=args.resume)
    return {"checkpoint": str(last), "config_hash": config_hash(cfg), "out_dir": cfg.out_dir,
            "epochs": cfg.epochs_joint + cfg.epochs_post}


# ---------------------------------------------------------------------------
# eval


def _result_path(args, task: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(args.ckpt).parent / f"eval_{task}.json"


def cmd_eval(args) -> dict:
    _, bundle, _, state = load_checkpoint(args.ckpt)
    enc = E.FrozenEncoder(bundle)
    task = args.task
    metrics: dict[str, Any]
    if task in ("linear", "retrieval", "occluded"):
        train = _require_trimmed(load_split(args.data, "train.skl"), "--data train split")
        test = _require_trimmed(load_split(args.test or args.data, "test.skl"), "test split")
        if task == "linear":
            metrics = {"top1": E.linear_eval(enc, train, test)}
        elif task == "retrieval":
            p = E.knn_retrieval(enc, train, test, k=args.k)
            metrics = {"precision": p, "top1": p, "k": args.k}
        else:
            metrics = _occluded(args, enc, train, test)
    elif task == "fewshot":
        held = _require_trimmed(load_split(args.heldout or args.data, "heldout.skl"), "held-out split")
        mean, std = E.fewshot_eval(enc, held, n_way=args.ways, k_shot=args.shots, episodes=args.episodes,
                                   seed=args.seed, n_query=args.queries)
        metrics = {"mean": mean, "std": std, "n_way": args.ways, "k_shot": args.shots, "episodes": args.episodes}
    else:
        train = _require_untrimmed(load_split(args.data, "untrimmed_train.skl"), "--data detection train split")
        test = _require_untrimmed(load_split(args.test or args.data, "untrimmed_test.skl"), "detection test split")
        tious = [float(t) for t in args.tious.split(",")]
        result = E.detect(enc.frames, train, test, tious)
        metrics = {"map": {f"{k:g}": v for k, v in result.items()}}
    doc = {"task": task, "config_hash": state["config_hash"], "checkpoint": str(args.ckpt),
           "epoch": int(state["epoch"]), **metrics}
    path = _result_path(args, task)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _occluded(args, enc, train, test) -> dict:
    if args.occluded:
        arch = read_archive(args.occluded)
        extra = arch["extra"]
        occ = E.OccludedSet(_require_trimmed(arch["samples"], "--occluded"), extra.get("mode"),
                            extra.get("seed"), extra.get("ratio"))
    else:
        occ = E.build_occluded_set(test, args.mode, args.occ_seed, ratio=args.ratio)
        stored = _result_path(args, "occluded").parent / f"occluded_{args.mode}_seed{args.occ_seed}.skl"
        stored.parent.mkdir(parents=True, exist_ok=True)
        write_archive(stored, occ.samples, max(s.label for s in occ.samples) + 1,
                      {"mode": occ.mode, "seed": occ.seed, "ratio": occ.ratio})
    return {"mode": args.mode, "top1": E.occluded_eval(enc, train, occ, args.mode),
            "clean_top1": E.linear_eval(enc, train, test), "occlusion_seed": occ.seed, "ratio": occ.ratio}


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(args) -> dict:
    state = read_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(state["config"])
    bundle = EncoderBundle(cfg.model)
    try:
        bundle.load_state_dict(state["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"{args.ckpt}: model section does not match its config ({exc})") from exc
    queue = state["queue"]
    return {
        "stage": state["stage"],
        "epoch": int(state["epoch"]),
        "global_step": int(state["global_step"]),
        "config_hash": state["config_hash"],
        "parameters": {
            "query_encoder": count_parameters(bundle.encoder_q) + count_parameters(bundle.projector_q),
            "key_encoder": count_parameters(bundle.encoder_k) + count_parameters(bundle.projector_k),
            "decoder": count_parameters(bundle.decoder),
            "prompts": count_parameters(bundle.prompts),
        },
        "queue_fill": int(queue["size"]),
        "queue_capacity": int(queue["storage"].shape[0]),
    }


def _print_inspect(info: dict):
    print(f"stage:        {info['stage']}")
    print(f"epoch:        {info['epoch']} (step {info['global_step']})")
    print(f"config hash:  {info['config_hash']}")
    for name, n in info["parameters"].items():
        print(f"params/{name + ':':15s}{n}")
    print(f"queue:        {info['queue_fill']}/{info['queue_capacity']}")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skelrep", description="Skeleton representation pre-training and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--joints", type=int, default=25)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heldout", type=int, default=0, help="extra held-out classes for few-shot")
    p.add_argument("--untrimmed", type=int, default=0, help="untrimmed sequences per detection split")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="run pre-training")
    p.add_argument("--config")
    p.add_argument("--data", help="training archive or dataset directory")
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs-joint", type=int)
    p.add_argument("--epochs-post", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, repeatable")

    p = sub.add_parser("eval", help="evaluate a frozen checkpoint")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="dataset directory or training-split archive")
    p.add_argument("--test", help="test archive (default: <data>/test.skl)")
    p.add_argument("--heldout", help="held-out archive for few-shot (default: <data>/heldout.skl)")
    p.add_argument("--out", help="result JSON path (default: next to the checkpoint)")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--mode", choices=("spatial", "temporal"), default="temporal")
    p.add_argument("--occ-seed", type=int, default=0)
    p.add_argument("--ratio", type=float)
    p.add_argument("--occluded", help="stored occluded test archive")
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--queries", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tious", default="0.1,0.2,0.3,0.4,0.5")

    p = sub.add_parser("inspect", help="summarise a checkpoint")
    p.add_argument("ckpt")
    p.add_argument("--json", action="store_true")
    return parser


def _set_workers():
    raw = os.environ.get(WORKERS_ENV)
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{WORKERS_ENV} must be >= 1")
    torch.set_num_threads(n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _set_workers()
        if args.command == "eval" and args.task != "fewshot" and not args.data:
            raise UsageError(f"eval {args.task} needs --data")
        if args.command == "eval" and args.task == "fewshot" and not (args.data or args.heldout):
            raise UsageError("eval fewshot needs --heldout or --data")
        if args.command == "synth":
            print(json.dumps(cmd_synth(args), sort_keys=True))
        elif args.command == "pretrain":
            print(json.dumps(cmd_pretrain(args), sort_keys=True))
        elif args.command == "eval":
            print(json.dumps(cmd_eval(args), sort_keys=True))
        else:
            info = cmd_inspect(args)
            print(json.dumps(info, sort_keys=True)) if args.json else _print_inspect(info)
    except (UsageError, ConfigError) as exc:
        print(f"skelrep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"skelrep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArchiveError, ParseError, CheckpointError, E.EvalError, OSError) as exc:
        print(f"skelrep: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
