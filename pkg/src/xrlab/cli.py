"""Command-line front end: generate, train, eval, grid, validate, sweep-k."""

from __future__ import annotations

import os

# Worker caps must land before numpy initializes its thread pools, so keep
# this above every import that pulls numpy in.  Has no effect if numpy was
# already imported by the embedding process.
_XR_THREADS = os.environ.get("XR_THREADS")
if _XR_THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                 "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _XR_THREADS)

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace

from . import experiments as ex
from . import retrieval as ret
from . import taskgen as tg
from . import training as tr

log = logging.getLogger("xrlab")

SPLITS = ("train", "dev", "test")


# ---------------------------------------------------------------------------
# Config plumbing

def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise tg.ConfigError(f"{path}: invalid JSON ({exc})") from None


def _gen_config_from(payload, seed=None):
    try:
        cfg = tg.GenConfig(**payload)
    except TypeError as exc:
        raise tg.ConfigError(f"bad generation config: {exc}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def _train_config_from(payload, seed=None):
    try:
        cfg = tr.TrainConfig(**payload)
    except TypeError as exc:
        raise tg.ConfigError(f"bad train config: {exc}") from None
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg.validate()


def _print_config(command, payload):
    print(json.dumps({"command": command, **payload}, indent=2,
                     sort_keys=True, default=str))


def _load_datasets(data_dir):
    meta_path = os.path.join(data_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise tg.ConfigError(f"no dataset at {data_dir!r} (missing meta.json)")
    cfg, specs = tg.load_meta(meta_path)
    data = {}
    for split in SPLITS:
        path = os.path.join(data_dir, f"{split}.jsonl")
        if not os.path.exists(path):
            raise tg.ConfigError(f"missing split file {path!r}")
        data[split] = tg.load_split(path, cfg, split)
    data["specs"] = specs
    return cfg, data


def _result_from_checkpoint(ckpt_dir, data_dir):
    cp, enc_params, meta = tr.load_checkpoint(ckpt_dir)
    gen_cfg = tg.GenConfig(**meta["gen_config"])
    tcfg = tr.TrainConfig(**meta["train_config"])
    _, data = _load_datasets(data_dir)
    store = optimal_index = None
    if tcfg.retrieval_mode in ("fixed", "learned"):
        if enc_params is None:
            raise tg.ConfigError(f"{ckpt_dir!r} lacks the retriever snapshot")
        store = ret.build_store(data["train"], enc_params)
    elif tcfg.retrieval_mode == "optimal":
        optimal_index = ret.build_optimal_index(data["train"])
    train_log = tr.load_log(os.path.join(ckpt_dir, "train_log.csv"))
    result = tr.TrainResult(classifier=cp, encoder=enc_params, store=store,
                            optimal_index=optimal_index, log=train_log,
                            gen_config=gen_cfg, train_config=tcfg,
                            k_effective=meta["k_effective"])
    return result, data


# ---------------------------------------------------------------------------
# Subcommands

def cmd_generate(args):
    payload = _load_json(args.config) if args.config else {}
    if isinstance(payload, dict) and "gen" in payload:
        payload = payload["gen"]  # same file layout cmd_train reads
    cfg = _gen_config_from(payload, seed=args.seed)
    _print_config("generate", {"gen": asdict(cfg), "out": args.out})

    data = tg.generate_dataset(cfg)
    os.makedirs(args.out, exist_ok=True)
    for split in SPLITS:
        tg.save_split(data[split], os.path.join(args.out, f"{split}.jsonl"))
    tg.save_meta(cfg, data["specs"], os.path.join(args.out, "meta.json"))
    stats = {split: tg.split_stats(data[split]) for split in SPLITS}
    with open(os.path.join(args.out, "stats.json"), "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")
    sizes = "/".join(str(len(data[s])) for s in SPLITS)
    print(f"wrote {sizes} points to {args.out}")
    return 0


def cmd_train(args):
    payload = _load_json(args.config) if args.config else {}
    tcfg = _train_config_from(payload.get("train", {}), seed=args.seed)
    if args.data:
        gen_cfg, data = _load_datasets(args.data)
    else:
        gen_cfg = _gen_config_from(payload.get("gen", {}))
        data = None
    _print_config("train", {"gen": asdict(gen_cfg), "train": asdict(tcfg),
                            "data": args.data, "out": args.out})

    if data is None:
        data = tg.generate_dataset(gen_cfg)
    result, attempts = tr.train_with_restarts(
        gen_cfg, tcfg, datasets=data, max_restarts=args.auto_restart)
    tr.save_checkpoint(result, args.out)

    dev = tr.evaluate_result(result, data["dev"].points)
    test = tr.evaluate_result(result, data["test"].points)
    print(f"best dev accuracy {result.log.best_dev_acc:.4f} "
          f"(epoch {result.log.best_epoch})")
    print(f"dev {dev:.4f} ±{ex.binomial_ci(dev, len(data['dev'])):.4f}  "
          f"test {test:.4f} ±{ex.binomial_ci(test, len(data['test'])):.4f}")
    if attempts:
        print(f"restarted {attempts} time(s) after divergence")
    if result.log.diverged:
        print(f"warning: run diverged at epoch {result.log.failure_epoch}, "
              f"step {result.log.failure_step}; kept best checkpoint")
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args):
    _print_config("eval", {"checkpoint": args.checkpoint, "data": args.data,
                           "split": args.split, "k": args.k,
                           "seed": args.seed})
    result, data = _result_from_checkpoint(args.checkpoint, args.data)
    points = data[args.split].points
    acc = tr.evaluate_result(result, points, k=args.k)
    ci = ex.binomial_ci(acc, len(points))
    print(f"{args.split} accuracy {acc:.4f} ±{ci:.4f} (n={len(points)})")
    return 0


def cmd_validate(args):
    _print_config("validate", {"data": args.data, "seed": args.seed})
    cfg, data = _load_datasets(args.data)
    checks = tg.validate_datasets({s: data[s] for s in SPLITS}, cfg,
                                  data["specs"])
    ok = True
    for name, passed, detail in checks:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}"
              + ("" if passed else f": {detail}"))
    print("all checks passed" if ok else "validation failed")
    return 0 if ok else 1


def cmd_grid(args):
    payload = _load_json(args.config)
    if "cells" in payload:
        spec = ex.spec_from_json(payload)
    else:
        name = payload.get("grid")
        if name not in ex.GRIDS:
            raise ex.GridError(
                f"unknown grid {name!r}; choose from {sorted(ex.GRIDS)}")
        spec = ex.GRIDS[name](scale=payload.get("scale", "desk"),
                              seeds=tuple(payload.get("seeds", (0, 1, 2))))
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    _print_config("grid", ex.spec_to_json(spec))

    records = ex.run_grid(spec, args.out, max_restarts=args.auto_restart)
    failed = sum(not r.ok for r in records)
    for cell, (mean, half) in ex.cell_summary(records).items():
        print(f"{cell}: test {mean:.4f} ±{half:.4f}")
    print(f"{len(records)} runs ({failed} failed); results under {args.out}")
    return 0


def cmd_sweep_k(args):
    try:
        k_values = [int(v) for v in args.k_values.split(",") if v.strip()]
    except ValueError:
        raise tg.ConfigError(f"bad --k-values {args.k_values!r}") from None
    if not k_values or min(k_values) < 1:
        raise tg.ConfigError("--k-values needs positive integers")
    _print_config("sweep-k", {"checkpoint": args.checkpoint,
                              "data": args.data, "split": args.split,
                              "k_values": k_values, "out": args.out})

    result, data = _result_from_checkpoint(args.checkpoint, args.data)
    if result.train_config.retrieval_mode == "none":
        raise tg.ConfigError("checkpoint was trained without retrieval")
    points = data[args.split].points
    rows = []
    for k in k_values:
        acc = tr.evaluate_result(result, points, k=k)
        rows.append((k, args.split, acc, ex.binomial_ci(acc, len(points))))
        print(f"k={k}: {args.split} accuracy {acc:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(("k", "split", "accuracy", "ci"))
            for k, split, acc, ci in rows:
                writer.writerow((k, split, repr(acc), repr(ci)))
        print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="xrlab",
        description="Counting-task laboratory for classification with "
                    "retrieved explanations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("generate", help="write dataset splits to a directory")
    sp.add_argument("--config", help="GenConfig JSON file")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a classifier (plus retriever)")
    sp.add_argument("--config", help='JSON file {"gen": {...}, "train": {...}}')
    sp.add_argument("--data", help="dataset directory (else generated)")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--auto-restart", type=int, default=0, metavar="N",
                    help="retry diverged runs up to N times with bumped seeds")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--k", type=int, default=None,
                    help="marginalize over k retrieved sets (default: trained k)")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("grid", help="run a research-question grid")
    sp.add_argument("--config", required=True,
                    help='JSON: {"grid": "rq2", "scale": "desk", "seeds": [...]}'
                         " or a full spec with cells")
    sp.add_argument("--out", required=True)
    sp.add_argument("--auto-restart", type=int, default=0, metavar="N")
    common(sp)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("validate", help="re-check every dataset invariant")
    sp.add_argument("data")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("sweep-k", help="dev accuracy per k without retraining")
    sp.add_argument("checkpoint")
    sp.add_argument("data")
    sp.add_argument("--k-values", required=True, help="comma list, e.g. 1,5,10")
    sp.add_argument("--split", choices=SPLITS, default="dev")
    sp.add_argument("--out", help="CSV path")
    common(sp)
    sp.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s")
    try:
        return args.func(args)
    except (tg.ConfigError, ex.GridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map any runtime failure to 1
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
