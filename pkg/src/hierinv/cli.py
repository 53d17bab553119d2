"""Command-line entry point: ``hierinv <subcommand> [options]``.

Exit codes: 0 success, 1 a requested direction check failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config
from .io import CheckpointError, DatasetError, generate_synthetic, load_checkpoint, load_dataset

logger = logging.getLogger("hierinv")


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    sets = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        sets[key.strip()] = value
    if getattr(args, "seed", None) is not None:
        sets["train.seed"] = str(args.seed)
    return cfg.with_overrides(sets).validate()


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="config file ([section] key = value)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    if seed:
        p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--out", help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierinv", description="Multi-stage self-supervised pretraining and probes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset and its manifest")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="self-supervised pretraining; writes checkpoints and metrics.csv")
    _common(p)
    p.add_argument("--ckpt-every", type=int, help="overrides train.ckpt_every")
    p.add_argument("--log-every", type=int, default=20)

    p = sub.add_parser("linear-probe", help="linear classifier on frozen features")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", type=int)
    p.add_argument("--baseline", help="checkpoint that must score strictly lower")

    p = sub.add_parser("aug-probe", help="predict colour-jitter strength bucket from a representation")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--representation", choices=("e", "h"), default="e")
    p.add_argument("--baseline", help="checkpoint whose e must score strictly lower")

    p = sub.add_parser("invariance-report", help="per-stage cosine invariance CSV")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--check", action="store_true", help="require flip invariance stage 4 > stage 1")

    p = sub.add_parser("rotation-study", help="rotation from stage 1 vs stage 4 vs none")
    _common(p, seed=False)
    p.add_argument("--seeds", default=None, help="comma list, default eval.seeds")
    p.add_argument("--cache", help="pretrain cache directory")
    return parser


def _seeds(args, cfg: Config) -> tuple:
    return tuple(int(s) for s in args.seeds.split(",")) if args.seeds else tuple(cfg.eval.seeds)


def _labelled(cfg: Config):
    train = load_dataset(cfg.data.train_path, cfg.data.image_size)
    test = load_dataset(cfg.data.test_path, cfg.data.image_size)
    return train, test


def _emit(result, out) -> None:
    from .experiments import write_rows
    print(json.dumps(result.row(), default=str))
    if out:
        write_rows(out, [result.row()])


def cmd_gen_data(args) -> int:
    path = generate_synthetic(args.n, args.classes, args.seed, args.out)
    print(f"wrote {path} ({args.n} images, {args.classes} classes)")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import run_pretrain
    cfg = _config(args)
    if args.ckpt_every is not None:
        cfg = cfg.with_overrides({"train.ckpt_every": str(args.ckpt_every)})
    result = run_pretrain(cfg, args.out, args.log_every)
    print(f"checkpoint {result.checkpoint}")
    print(f"metrics {result.metrics}")
    print("final " + " ".join(f"{k}={v:.6f}" for k, v in zip(("L1", "L2", "L3", "L4", "L_overall"), result.final.row())))
    return 0


def cmd_linear_probe(args) -> int:
    from .probes import linear_probe
    cfg = _config(args)
    stage = args.stage or cfg.eval.stage
    train, test = _labelled(cfg)
    kw = dict(stage=stage, seed=cfg.train.seed, epochs=cfg.eval.probe_epochs, lr=cfg.eval.probe_lr,
              batch_size=cfg.eval.probe_batch)
    result = linear_probe(args.ckpt, train, test, **kw)
    _emit(result, args.out)
    if args.baseline:
        base = linear_probe(args.baseline, train, test, **kw)
        ok = result.accuracy > base.accuracy
        print(f"{'PASS' if ok else 'FAIL'} {result.accuracy:.4f} > baseline {base.accuracy:.4f}")
        return 0 if ok else 1
    return 0


def cmd_aug_probe(args) -> int:
    from .probes import aug_probe
    cfg = _config(args)
    images, _ = load_dataset(cfg.data.test_path, cfg.data.image_size)
    kw = dict(n_buckets=cfg.eval.n_buckets, per_bucket=cfg.eval.per_bucket, seed=cfg.train.seed,
              epochs=cfg.eval.probe_epochs, lr=cfg.eval.probe_lr)
    result = aug_probe(args.ckpt, images, args.representation, **kw)
    _emit(result, args.out)
    if args.baseline:
        base = aug_probe(args.baseline, images, "e", **kw)
        ok = result.accuracy > base.accuracy
        print(f"{'PASS' if ok else 'FAIL'} {result.accuracy:.4f} > baseline {base.accuracy:.4f}")
        return 0 if ok else 1
    return 0


def cmd_invariance_report(args) -> int:
    from .probes import invariance_report
    cfg = _config(args)
    images, _ = load_dataset(cfg.data.test_path, cfg.data.image_size)
    report = invariance_report(args.ckpt, images[:cfg.eval.invariance_samples])
    out = Path(args.out or Path(cfg.eval.out_dir) / "invariance.csv")
    report.to_csv(out)
    print(out.read_text(), end="")
    if args.check:
        s1, s4 = report.value(1, "hflip"), report.value(4, "hflip")
        ok = s4 > s1
        print(f"{'PASS' if ok else 'FAIL'} flip invariance stage 4 {s4:.4f} > stage 1 {s1:.4f}")
        return 0 if ok else 1
    return 0


def cmd_rotation_study(args) -> int:
    from .experiments import SyntheticSplit, rotation_placement_experiment
    cfg = _config(args)
    (xtr, ytr), (xte, yte) = _labelled(cfg)
    out = args.out or str(Path(cfg.eval.out_dir) / "rotation_study.csv")
    check = rotation_placement_experiment(cfg, SyntheticSplit(xtr, ytr, xte, yte), _seeds(args, cfg), args.cache, out)
    for name, results in check.detail["results"].items():
        print(f"{name}: " + " ".join(f"{r.accuracy:.4f}" for r in results))
    print(check.line())
    print(f"wrote {out}")
    return 0 if check.passed else 1


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "linear-probe": cmd_linear_probe,
            "aug-probe": cmd_aug_probe, "invariance-report": cmd_invariance_report,
            "rotation-study": cmd_rotation_study}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "pretrain" else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"hierinv {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
