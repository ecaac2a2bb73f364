"""Command-line entry point: gendata, train, eval, verify.

Every command echoes its fully-resolved configuration to stderr before doing
work. Reports and data go to stdout or declared output files, logs to
stderr. Exit codes: 0 success, 1 validation error, 2 runtime or numerical
error. `METASEG_SEED` overrides the seed after config file and flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .checkpoint import load_checkpoint
from .config import RunConfig
from .dataset_io import load_dataset_dir, save_dataset
from .episodes import dataset_hash, gen_synthetic, split_classes
from .errors import NumericalError, ValidationError
from .evaluation import evaluate, shot_sweep
from .trainer import meta_train
from .verify import run_verify

logger = logging.getLogger("metaseg")


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML-style config file")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--precision", choices=["f32", "f64"], help="compute precision")
    p.add_argument("--head", choices=["ridge", "prototype", "convstep"], help="base learner")
    p.add_argument("--no-gc-branch", action="store_true", help="disable the global context branch")
    p.add_argument("--shots", help="comma-separated shot counts, e.g. 1,5,10")
    p.add_argument("--workers", type=int, help="episode preparation threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gendata", help="generate the synthetic dataset directory")
    _add_shared(g)

    t = sub.add_parser("train", help="meta-train on the train split")
    _add_shared(t)
    t.add_argument("--dataset-dir", help="load dataset from this directory instead of generating")
    t.add_argument("--resume", help="checkpoint to resume from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on novel episodes")
    _add_shared(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset-dir", help="dataset directory (generated from config if omitted)")
    e.add_argument("--k", type=int)
    e.add_argument("--n", type=int)
    e.add_argument("--q", type=int)
    e.add_argument("--tasks", type=int)
    e.add_argument("--split", choices=["train", "novel"])

    v = sub.add_parser("verify", help="run the f64 verification battery")
    _add_shared(v)
    v.add_argument("--fast", action="store_true", help="smaller sampler scan (development)")
    return parser


def _resolve_seed(cfg_seed, args) -> int:
    seed = cfg_seed
    if args.seed is not None:
        seed = args.seed
    env = os.environ.get("METASEG_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ValidationError(f"METASEG_SEED must be an integer, got {env!r}") from None
    return int(seed)


def _echo_config(tag: str, payload: dict) -> None:
    print(f"[{tag}] resolved config: {json.dumps(payload, sort_keys=True)}", file=sys.stderr)


def _load_or_generate_dataset(run: RunConfig, dataset_dir):
    if dataset_dir:
        ds = load_dataset_dir(dataset_dir)
        if not ds.train_classes and not ds.novel_classes:
            raise ValidationError(f"{dataset_dir}: split.txt missing or empty")
        return ds
    synth = run.synth_config()
    return split_classes(gen_synthetic(synth), run.novel_ids())


def cmd_gendata(args) -> int:
    run = RunConfig.load(args.config)
    if not args.out:
        raise ValidationError("gendata requires --out DIR")
    synth = run.synth_config()
    synth = replace(synth, seed=_resolve_seed(synth.seed, args))
    _echo_config("gendata", {"data": synth.__dict__, "novel": run.novel_ids(), "out": args.out})
    ds = split_classes(gen_synthetic(synth), run.novel_ids())
    save_dataset(ds, args.out)
    print(f"dataset_sha256={dataset_hash(ds)}")
    print(f"records={len(ds.records)} classes={len(ds.class_names)}")
    return 0


def cmd_train(args) -> int:
    run = RunConfig.load(args.config)
    tc = run.train_config()
    overrides = {}
    if args.seed is not None or os.environ.get("METASEG_SEED"):
        overrides["seed"] = _resolve_seed(tc.seed, args)
    if args.precision:
        overrides["precision"] = args.precision
    if args.head:
        overrides["head"] = args.head
    if args.no_gc_branch:
        overrides["gc_branch_enabled"] = False
    if args.workers:
        overrides["workers"] = args.workers
    tc = replace(tc, **overrides)
    embed = run.embed_config() if run.embed else None
    ds = _load_or_generate_dataset(run, args.dataset_dir)
    out_dir = args.out or run.paths.get("out_dir")
    payload = {"train": tc.__dict__, "embed": embed.__dict__ if embed else "desk-default",
               "out": out_dir, "dataset_dir": args.dataset_dir}
    _echo_config("train", {k: str(v) for k, v in payload.items()})
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, metrics = meta_train(ds, tc, embed=embed, out_dir=out_dir, resume=resume)
    for m in metrics:
        print(f"epoch={m.epoch} mean_loss={m.mean_loss:.6f} eval_miou={m.eval_miou:.6f}")
    if out_dir:
        print(f"checkpoint={out_dir}/latest.ckpt")
    return 0


def cmd_eval(args) -> int:
    run = RunConfig.load(args.config)
    ev = dict(run.eval)
    for key, val in (("k", args.k), ("n", args.n), ("q", args.q), ("num_tasks", args.tasks),
                     ("split", args.split)):
        if val is not None:
            ev[key] = val
    if args.shots:
        ev["shots"] = [int(x) for x in args.shots.split(",")]
    seed = _resolve_seed(ev.get("seed", 0), args)
    ev["seed"] = seed
    k = int(ev.get("k", 2))
    n = int(ev.get("n", 5))
    q = int(ev.get("q", 2))
    num_tasks = int(ev.get("num_tasks", 100))
    split = ev.get("split", "novel")
    _echo_config("eval", {"checkpoint": args.checkpoint, "dataset_dir": args.dataset_dir, **ev})
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load_or_generate_dataset(run, args.dataset_dir)
    if "shots" in ev and ev["shots"]:
        sweep = shot_sweep(ckpt, ds, k=k, shots=[int(s) for s in ev["shots"]], q=q,
                           num_tasks=num_tasks, seed=seed, split=split)
        print(sweep.format_text())
        if args.out:
            sweep.write_csv(args.out)
            logger.info("wrote %s", args.out)
    else:
        report = evaluate(ckpt, ds, split=split, k=k, n=n, q=q, num_tasks=num_tasks, seed=seed)
        print(report.format_text())
        if args.out:
            report.write_csv(args.out)
            logger.info("wrote %s", args.out)
    return 0


def cmd_verify(args) -> int:
    _echo_config("verify", {"fast": bool(args.fast)})
    checks = run_verify(fast=bool(args.fast))
    failed = 0
    for name, ok, detail in checks:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed += 0 if ok else 1
    if failed:
        print(f"{failed} check(s) failed", file=sys.stderr)
        return 2
    print("all checks passed")
    return 0


_COMMANDS = {"gendata": cmd_gendata, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit code 2
        logger.exception("unhandled failure")
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
