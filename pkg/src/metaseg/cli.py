"""``metaseg`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 unusable checkpoint, 5 missing or invalid data.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

from .config import RunConfig, apply_overrides, load_config, write_config
from .errors import (ConfigError, EvalError, FormatError, NumericError, SequenceError, SizeError,
                     StructureError)
from .experiments import Ablation, benchmark, load_split, write_ablation_csv
from .inference import run_taskset, write_predictions
from .metaopt import initial_meta, load_meta, meta_train, save_meta
from .segmodel import check_params
from .taskset import TaskSet, gen_synthetic, load_davis_layout, read_label_png, write_davis_layout
from .vosmetrics import PredictionSet, evaluate, report_rows, write_report_csv, CSV_COLUMNS

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_DATA = 0, 2, 3, 4, 5

log = logging.getLogger("metaseg")

METRIC_COLUMNS = ("step", "loss", "iou", "lambda_mean", "lambda_min", "lambda_max", "lambda_zero_frac",
                  "skipped")
TIMING_COLUMNS = ("sequence", "object", "first_frame", "frames", "iterations", "finetune_seconds",
                  "forward_seconds", "adapt_seconds")


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    cfg = load_config(path) if path else RunConfig().resolved()
    env = os.environ.get("METASEG_WORKERS")
    if env is not None:
        overrides = list(overrides) + [f"run.workers={env}"]
    return apply_overrides(cfg, overrides) if overrides else cfg


def _out_dir(cfg: RunConfig, override: Optional[str]) -> str:
    path = override or cfg.run.out_dir
    os.makedirs(path, exist_ok=True)
    return path


# ----------------------------------------------------------------------------
# meta-train


def cmd_meta_train(args) -> int:
    cfg = _config(args.config, args.set)
    out = _out_dir(cfg, args.out)
    d = cfg.data
    train = load_split(d.train, cfg.synth, d.train_tasks, d.train_seed, "train")
    write_config(cfg, os.path.join(out, "config.ini"))
    history: List[Dict] = []
    meta = meta_train(train, cfg.trainer, init=initial_meta(cfg.trainer), history=history)
    save_meta(meta, os.path.join(out, "checkpoint.eosm"))
    with open(os.path.join(out, "metrics.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(history)
    print(f"wrote {out}/checkpoint.eosm after {cfg.trainer.steps} steps")
    return EXIT_OK


# ----------------------------------------------------------------------------
# infer


def _load_checkpoint(path: str, cfg: RunConfig):
    try:
        meta = load_meta(path)
        check_params(meta.theta0, cfg.arch)
    except OSError as exc:
        raise _Exit(EXIT_CHECKPOINT, f"cannot read checkpoint {path}: {exc}") from None
    except (FormatError, StructureError) as exc:
        raise _Exit(EXIT_CHECKPOINT, f"{path}: {exc}") from None
    return meta


def _dataset(root: str, split: str) -> TaskSet:
    if not os.path.isdir(root):
        raise _Exit(EXIT_DATA, f"no such dataset directory {root!r}")
    ts = load_davis_layout(root, split)
    if not ts.sequences:
        raise _Exit(EXIT_DATA, f"no sequences under {root!r}")
    return ts


def cmd_infer(args) -> int:
    cfg = _config(args.config, args.set)
    changes = {}
    if args.iters is not None:
        changes["T"] = args.iters
    if args.ona is not None:
        changes["use_ona"] = args.ona == "on"
    if args.ona_interval is not None:
        changes["ona_interval"] = args.ona_interval
    if args.ona_iters is not None:
        changes["ona_iters"] = args.ona_iters
    icfg = replace(cfg.inference, **changes).validate()
    seed = cfg.run.seed if args.seed is None else args.seed
    cfg = replace(cfg, inference=icfg, run=replace(cfg.run, seed=seed))
    meta = _load_checkpoint(args.checkpoint, cfg)
    ts = _dataset(args.data, "test")
    out = _out_dir(cfg, args.out)
    results = run_taskset(meta, ts, icfg, seed=seed)
    write_predictions(results, out)
    write_config(cfg, os.path.join(out, "config.ini"))
    with open(os.path.join(out, "timing.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in results:
            n = len(r.labels)
            for k, o in sorted(r.objects.items()):
                w.writerow([r.seq_id, k, o.first, n, o.iterations, f"{o.finetune_seconds:.6f}",
                            f"{o.forward_seconds:.6f}", f"{o.adapt_seconds:.6f}"])
    with open(os.path.join(out, "ona.log"), "w") as fh:
        for r in results:
            for k, o in sorted(r.objects.items()):
                for i in o.ona_rounds:
                    fh.write(f"{r.seq_id} object {k} frame {i}\n")
    print(f"wrote predictions for {len(results)} sequences to {out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval


def _prediction_dir(root: str) -> str:
    ann = os.path.join(root, "Annotations")
    return ann if os.path.isdir(ann) else root


def _read_timing(root: str):
    seconds: Dict[str, float] = {}
    forward: Dict[str, float] = {}
    path = os.path.join(root, "timing.csv")
    if not os.path.exists(path):
        return seconds, forward
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            s = row["sequence"]
            total = sum(float(row[c]) for c in ("finetune_seconds", "forward_seconds", "adapt_seconds"))
            seconds[s] = seconds.get(s, 0.0) + total
            forward[s] = forward.get(s, 0.0) + float(row["forward_seconds"])
    return seconds, forward


def load_predictions(pred_root: str, gt: TaskSet) -> PredictionSet:
    """Read predicted label PNGs for every ground-truth frame; missing files raise EvalError listing them."""
    base = _prediction_dir(pred_root)
    labels: Dict[str, List] = {}
    gaps = []
    for seq in gt.sequences:
        # frames after the earliest annotation are the ones that get scored
        first = next((t for t, lab in enumerate(seq.labels) if lab is not None and lab.any()), len(seq.frames))
        row = []
        for i in range(len(seq.frames)):
            path = os.path.join(base, seq.id, f"{i:05d}.png")
            if os.path.exists(path):
                row.append(read_label_png(path))
            else:
                row.append(None)
                if i > first and seq.labels[i] is not None:
                    gaps.append(f"{seq.id}/{i:05d}.png")
        labels[seq.id] = row
    if gaps:
        shown = "\n  ".join(gaps[:20])
        more = f"\n  ... and {len(gaps) - 20} more" if len(gaps) > 20 else ""
        raise EvalError(f"missing predictions ({len(gaps)} files):\n  {shown}{more}")
    seconds, forward = _read_timing(pred_root)
    return PredictionSet(labels, seconds, forward)


def cmd_eval(args) -> int:
    if not os.path.isdir(args.pred):
        raise _Exit(EXIT_DATA, f"no such prediction directory {args.pred!r}")
    gt = _dataset(args.gt, "test")
    report = evaluate(load_predictions(args.pred, gt), gt)
    out = args.out or os.path.join(args.pred, "eval.csv")
    write_report_csv(report, out)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(report_rows(report))
    return EXIT_OK


# ----------------------------------------------------------------------------
# gen-synth and ablate


def cmd_gen_synth(args) -> int:
    cfg = _config(args.config, args.set)
    if args.split is None:
        ts = gen_synthetic(cfg.synth, cfg.run.seed)
    else:
        d = cfg.data
        n, seed = (d.train_tasks, d.train_seed) if args.split == "train" else (d.test_tasks, d.test_seed)
        ts = gen_synthetic(replace(cfg.synth, n_tasks=n, split=args.split), seed)
    write_davis_layout(ts, args.out)
    print(f"wrote {len(ts.sequences)} sequences ({len(ts)} objects) to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args.config, args.set)
    out = _out_dir(cfg, args.out)
    write_config(cfg, os.path.join(out, "config.ini"))
    train, test = benchmark(cfg)
    rows = Ablation(cfg, train, test, out_dir=out, progress=lambda m: print(m, flush=True)).run()
    path = os.path.join(out, cfg.ablate.csv)
    write_ablation_csv(rows, path)
    for r in rows:
        print(f"{r.name:20s} T={r.T:<3d} J&F {r.jf:6.2f}  FPS {r.fps:7.2f}")
    print(f"wrote {path}")
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaseg", description=__doc__.splitlines()[0],
                                epilog="exit codes: 0 ok, 2 config, 3 numeric, 4 checkpoint, 5 missing data")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")

    sp = sub.add_parser("meta-train", help="meta-train initialization and learning rates")
    sp.add_argument("config")
    sp.add_argument("--out", help="output directory (default: [run] out_dir)")
    overrides(sp)
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("infer", help="segment every sequence of a DAVIS-layout dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--iters", type=int, help="initial fine-tuning iterations T")
    sp.add_argument("--ona", choices=("on", "off"))
    sp.add_argument("--ona-interval", type=int)
    sp.add_argument("--ona-iters", type=int)
    sp.add_argument("--config", help="run config supplying the architecture and inference settings")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="prediction directory (default: [run] out_dir)")
    overrides(sp)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("--out", help="CSV path (default: <pred>/eval.csv)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gen-synth", help="write a synthetic dataset in DAVIS layout")
    sp.add_argument("config")
    sp.add_argument("out")
    sp.add_argument("--split", choices=("train", "test"),
                    help="use the [data] task count and seed of this split")
    overrides(sp)
    sp.set_defaults(func=cmd_gen_synth)

    sp = sub.add_parser("ablate", help="run the additive ablation matrix")
    sp.add_argument("config")
    sp.add_argument("--out", help="output directory (default: [run] out_dir)")
    overrides(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, StructureError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (EvalError, SequenceError, SizeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
