"""``grouppool`` command line: generate, train, eval, gradcheck, inspect.

Exit codes: 0 success, 1 usage or I/O error, 2 numerical failure,
3 gradient check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import ClipFormatError, export_traces, generate, load_clips, save_clips, trace_records
from .model import load_checkpoint, predict, save_checkpoint
from .pooling import PoolingScheme
from .train import NumericalError, evaluate, gradcheck, tiny_config, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3
SCHEMES = [s.value for s in PoolingScheme]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _config(args) -> RunConfig:
    overrides = {
        "model": {"scheme": getattr(args, "scheme", None), "lam": getattr(args, "lam", None)},
        "train": {
            "lr": getattr(args, "lr", None),
            "epochs_stage1": getattr(args, "epochs_stage1", None),
            "epochs_stage2": getattr(args, "epochs_stage2", None),
        },
    }
    if args.seed is not None:
        overrides.setdefault("data" if args.command == "generate" else "train", {})["seed"] = args.seed
    try:
        return load_config(args.config, overrides)
    except (OSError, ValueError, TypeError) as e:
        raise UsageError(f"bad config: {e}") from None


def _load(path) -> list:
    try:
        return load_clips(path)
    except FileNotFoundError:
        raise UsageError(f"dataset not found: {path}") from None
    except ClipFormatError as e:
        raise UsageError(str(e)) from None


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, TypeError) as e:
        raise UsageError(f"bad checkpoint {path}: {e}") from None


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.paths.data_dir)
    if not out.is_dir():
        if args.no_create:
            raise UsageError(f"output directory does not exist: {out}")
        out.mkdir(parents=True)
    train_clips, test_clips = generate(cfg.data)
    save_clips(out / "train.jsonl", train_clips)
    save_clips(out / "test.jsonl", test_clips)
    for name, clips in (("train", train_clips), ("test", test_clips)):
        counts = Counter(c.activity_label for c in clips)
        per_class = " ".join(f"{k}:{counts.get(k, 0)}" for k in range(cfg.data.n_activities))
        print(f"{name}: {len(clips)} clips -> {out / (name + '.jsonl')}  per class {per_class}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data_dir = Path(args.data or cfg.paths.data_dir)
    clips = _load(data_dir / "train.jsonl")
    if not clips:
        raise UsageError(f"empty dataset: {data_dir / 'train.jsonl'}")
    out = Path(args.out or cfg.paths.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    with metrics_path.open("w") as fh:
        def log(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()
            if not args.quiet:
                print(f"stage {rec.stage} epoch {rec.epoch:3d}  loss {rec.loss:.4f}  "
                      f"group acc {rec.group_acc:.3f}  person acc {rec.person_acc:.3f}")

        try:
            result = train(cfg.model, cfg.train, clips, on_epoch=log)
        except NumericalError as e:
            print(f"numerical failure: {e}", file=sys.stderr)
            if e.param:
                print(f"offending parameter: {e.param}", file=sys.stderr)
            return EXIT_NUMERIC
        except ValueError as e:
            raise UsageError(str(e)) from None
    save_checkpoint(out / "checkpoint.json", cfg.model, result.params)
    print(f"checkpoint -> {out / 'checkpoint.json'}; metrics -> {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = args.checkpoint or cfg.paths.checkpoint
    model_cfg, params = _load_checkpoint(ckpt)
    clips = _load(args.dataset or cfg.paths.test_clips)
    if not clips:
        raise UsageError("empty dataset")
    try:
        report = evaluate(params, model_cfg, clips)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(report.format())
    out = Path(args.out) if args.out else Path(ckpt).with_name("eval.json")
    out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    schemes = [args.scheme] if args.scheme else SCHEMES
    seed = cfg.train.seed
    ok = True
    for scheme in schemes:
        report = gradcheck(tiny_config(scheme, lam=cfg.model.lam, group_loss=cfg.model.group_loss), seed)
        print(report.format())
        ok &= report.passed
    print("gradcheck PASSED" if ok else "gradcheck FAILED")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_inspect(args) -> int:
    cfg = _config(args)
    model_cfg, params = _load_checkpoint(args.checkpoint or cfg.paths.checkpoint)
    if not model_cfg.scheme.attentive:
        raise UsageError(f"scheme {model_cfg.scheme.value!r} has no attention traces")
    clips = _load(args.dataset or cfg.paths.test_clips)
    out = Path(args.out) if args.out else cfg.paths.traces
    records = []
    for clip in clips:
        pred = predict(params, model_cfg, clip)
        records.extend(trace_records(clip, pred.traces, pred.activity))
    export_traces(out, records)
    print(f"{len(records)} trace records for {len(clips)} clips -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grouppool", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    g = common(sub.add_parser("generate", help="write synthetic train/test clips"))
    g.add_argument("--no-create", action="store_true", help="fail instead of creating --out")
    g.set_defaults(func=cmd_generate)

    t = common(sub.add_parser("train", help="two-stage training; writes checkpoint + metrics"))
    t.add_argument("--scheme", choices=SCHEMES)
    t.add_argument("--data", help="directory holding train.jsonl")
    t.add_argument("--epochs-stage1", type=int)
    t.add_argument("--epochs-stage2", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="accuracy and confusion matrix"))
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.set_defaults(func=cmd_eval)

    c = common(sub.add_parser("gradcheck", help="finite-difference check of every parameter block"))
    c.add_argument("--scheme", choices=SCHEMES)
    c.add_argument("--lambda", dest="lam", type=float)
    c.set_defaults(func=cmd_gradcheck)

    i = common(sub.add_parser("inspect", help="export attention traces"))
    i.add_argument("--checkpoint")
    i.add_argument("--dataset")
    i.set_defaults(func=cmd_inspect)
    return parser


def _limit_threads():
    value = os.environ.get("GROUPPOOL_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"GROUPPOOL_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("GROUPPOOL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        limiter = _limit_threads()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
