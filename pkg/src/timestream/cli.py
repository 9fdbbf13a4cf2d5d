"""Command-line interface: gen-data, train, eval, predict, ablation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .ablation import format_text, run_ablation
from .checkpoint import CheckpointError, TrainConfig, load_checkpoint
from .data import (
    DataError,
    Sample,
    SyntheticConfig,
    build_samples,
    generate_synthetic,
    load_samples_jsonl,
    write_events_jsonl,
    write_samples_jsonl,
)
from .metrics import MetricError
from .ode import SolverConfig, SolverError
from .training import NumericError, evaluate, predict_at_time, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="timestream", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic clickstream and build samples")
    gen.add_argument("--users", type=int, required=True)
    gen.add_argument("--events", type=int, required=True)
    gen.add_argument("--period", type=float, default=1.0)
    gen.add_argument("--strength", type=float, default=0.9)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory (events/train/test JSONL)")
    gen.add_argument("--pool-size", type=int, default=50)
    gen.add_argument("--neg-per-pos", type=int, default=1)
    gen.add_argument("--max-len", type=int, default=100)

    tr = sub.add_parser("train", help="train a model on a samples JSONL file")
    tr.add_argument("--data", required=True)
    tr.add_argument("--base", choices=["dnn", "din"], default="dnn")
    tr.add_argument("--dynamics", choices=["none", "simple", "complex"], default="none")
    tr.add_argument("--solver", choices=["euler", "rk4", "rk4_adaptive"], default="rk4")
    tr.add_argument("--substeps", type=int, default=4)
    tr.add_argument("--lambda", dest="guide_weight", type=float, default=0.5)
    tr.add_argument("--guide", choices=["bpr", "as_written", "off"], default="bpr")
    tr.add_argument("--no-adaptive-step", action="store_true")
    tr.add_argument("--epochs", type=int, default=5)
    tr.add_argument("--batch", type=int, default=128)
    tr.add_argument("--lr", type=float, default=0.001)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--init-from", default=None)
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="weighted AUC of a checkpoint on a samples file")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", default=None)

    pr = sub.add_parser("predict", help="probabilities at future query times")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--sample", required=True, help="path to a single-sample JSON file")
    pr.add_argument("--times", required=True, help="comma-separated query times (days)")

    ab = sub.add_parser("ablation", help="run every arm over a data directory")
    ab.add_argument("--data", required=True, help="directory holding train.jsonl and test.jsonl")
    ab.add_argument("--bases", default="dnn")
    ab.add_argument("--seeds", default="1")
    ab.add_argument("--out", required=True)
    ab.add_argument("--epochs", type=int, default=5)
    ab.add_argument("--substeps", type=int, default=1)
    ab.add_argument("--lr", type=float, default=0.001)
    ab.add_argument("--batch", type=int, default=128)
    return parser


def _cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        num_users=args.users,
        events_per_user=args.events,
        period=args.period,
        preference_strength=args.strength,
        seed=args.seed,
        pool_a=tuple(f"a{i:03d}" for i in range(args.pool_size)),
        pool_b=tuple(f"b{i:03d}" for i in range(args.pool_size)),
    )
    events, _ = generate_synthetic(cfg)
    os.makedirs(args.out, exist_ok=True)
    write_events_jsonl(events, os.path.join(args.out, "events.jsonl"))
    by_user = {}
    for ev in events:
        by_user.setdefault(ev.user_id, []).append(ev)
    train_s, test_s = build_samples(by_user, max_len=args.max_len, neg_per_pos=args.neg_per_pos, rng_seed=args.seed)
    write_samples_jsonl(train_s, os.path.join(args.out, "train.jsonl"))
    write_samples_jsonl(test_s, os.path.join(args.out, "test.jsonl"))
    print(f"wrote {len(events)} events, {len(train_s)} train samples, {len(test_s)} test samples to {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        base_kind=args.base,
        dynamics=args.dynamics,
        solver=SolverConfig(method=args.solver, substeps_per_unit=args.substeps),
        guide_weight=args.guide_weight,
        guide_mode=args.guide,
        adaptive_time=not args.no_adaptive_step,
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
    )


def _cmd_train(args) -> int:
    samples = load_samples_jsonl(args.data)
    init = load_checkpoint(args.init_from) if args.init_from else None
    _, history = train(_train_config(args), samples, out_path=args.out, init_from=init)
    for row in history:
        print(
            f"epoch {row['epoch']}: total={row['total']:.6f} "
            f"target={row['target']:.6f} guide={row['guide']:.6f}"
        )
    print(f"saved checkpoint to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    samples = load_samples_jsonl(args.data)
    report = evaluate(ckpt, samples)
    doc = report.to_dict()
    print(json.dumps({"weighted_auc": doc["weighted_auc"], "skipped_users": doc["skipped_users"]}))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(doc, f)
        print(f"wrote report to {args.report}")
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    with open(args.sample, "r", encoding="utf-8") as f:
        sample = Sample.from_json(f.read())
    try:
        times = [float(t) for t in args.times.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--times must be comma-separated floats, got {args.times!r}") from None
    probs = predict_at_time(ckpt, sample, times)
    for t, p in zip(times, probs):
        print(f"t={t:g}: p={p:.6f}")
    return 0


def _cmd_ablation(args) -> int:
    train_s = load_samples_jsonl(os.path.join(args.data, "train.jsonl"))
    test_s = load_samples_jsonl(os.path.join(args.data, "test.jsonl"))
    bases = [b.strip() for b in args.bases.split(",") if b.strip()]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated ints, got {args.seeds!r}") from None
    template = TrainConfig(
        solver=SolverConfig(method="rk4", substeps_per_unit=args.substeps),
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
    )
    report = run_ablation(
        bases, train_s, test_s, seeds, out_dir=args.out, template=template,
        log=lambda msg: print(msg, flush=True),
    )
    print(format_text(report, seeds), end="")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "ablation": _cmd_ablation,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, MetricError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NumericError, SolverError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
