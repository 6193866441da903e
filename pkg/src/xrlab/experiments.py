"""Condition grids, a resumable grid runner, and result statistics."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, replace, asdict
from statistics import NormalDist, fmean, stdev

from . import taskgen as tg
from . import training as tr
from .taskgen import GenConfig
from .training import TrainConfig


class GridError(ValueError):
    """Raised for malformed grid specs, records, or statistic inputs."""


# ---------------------------------------------------------------------------
# Statistics

def _z_value(level):
    if not 0.0 < level < 1.0:
        raise GridError(f"confidence level must be in (0, 1), got {level}")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def binomial_ci(acc, n, level=0.95):
    """Normal-approximation CI half-width for a binomial proportion."""
    if not 0.0 <= acc <= 1.0:
        raise GridError(f"accuracy must be in [0, 1], got {acc}")
    if n <= 0:
        raise GridError(f"sample count must be positive, got {n}")
    return _z_value(level) * math.sqrt(acc * (1.0 - acc) / n)


def diff_proportions_test(acc_a, n_a, acc_b, n_b):
    """Two-sided pooled z-test p-value for a difference in proportions."""
    for acc in (acc_a, acc_b):
        if not 0.0 <= acc <= 1.0:
            raise GridError(f"accuracy must be in [0, 1], got {acc}")
    if n_a <= 0 or n_b <= 0:
        raise GridError("sample counts must be positive")
    pooled = (acc_a * n_a + acc_b * n_b) / (n_a + n_b)
    var = pooled * (1.0 - pooled) * (1.0 / n_a + 1.0 / n_b)
    if var == 0.0:
        # Degenerate pool (all successes or all failures on both sides).
        return 1.0 if acc_a == acc_b else 0.0
    z = (acc_a - acc_b) / math.sqrt(var)
    return 2.0 * NormalDist().cdf(-abs(z))


def seed_variance(accuracies, level=0.95):
    """Mean accuracy and CI half-width over seeds; NaN half-width for one seed."""
    accs = [float(a) for a in accuracies]
    if not accs:
        raise GridError("need at least one accuracy")
    mean = fmean(accs)
    if len(accs) < 2:
        return mean, float("nan")
    return mean, _z_value(level) * stdev(accs) / math.sqrt(len(accs))


# ---------------------------------------------------------------------------
# Analytic label strategies

STRATEGIES = ("or_features", "causal_only", "noncausal_only", "majority")


def _tuple_map(dataset, specs):
    if specs is not None:
        return {s.index: s.tuple for s in specs}
    table = {}
    for p in dataset.points:
        if p.e is None or p.e.kind != "full_info":
            raise GridError("strategy oracles need task tuples: pass specs "
                            "or use full_info explanations")
        table[p.index] = tuple(p.e.tokens[1:5])
    return table


def strategy_accuracy_oracle(dataset, strategy, specs=None):
    """Accuracy of an analytic, training-free label strategy on one split."""
    if strategy not in STRATEGIES:
        raise GridError(f"unknown strategy {strategy!r}")
    points = dataset.points
    if not points:
        raise GridError("empty split")
    if strategy == "majority":
        ones = sum(p.y for p in points)
        guess = int(2 * ones >= len(points))
        correct = ones if guess == 1 else len(points) - ones
        return correct / len(points)
    tuples = _tuple_map(dataset, specs)
    correct = 0
    for p in points:
        m, n, r, d = tuples[p.index]
        mn = int(p.x.count(m) > p.x.count(n))
        rd = int(p.x.count(r) > p.x.count(d))
        if strategy == "or_features":
            pred = int(mn or rd)
        elif strategy == "causal_only":
            pred = mn if p.causal == "mn" else rd
        else:
            pred = rd if p.causal == "mn" else mn
        correct += pred == p.y
    return correct / len(points)


# ---------------------------------------------------------------------------
# Grid specs

VARIANTS = ("plain", "task_given", "unseen_eval")


@dataclass(frozen=True)
class Cell:
    """One grid condition: a data config, a train config, an input variant."""
    name: str
    gen: GenConfig
    train: TrainConfig
    variant: str = "plain"


@dataclass(frozen=True)
class ExperimentSpec:
    rq: str
    cells: tuple
    seeds: tuple = (0, 1, 2)
    metrics: tuple = ("dev_accuracy", "test_accuracy")

    def validate(self):
        if not self.rq or not str(self.rq).isidentifier():
            raise GridError(f"rq tag must be a plain identifier, got {self.rq!r}")
        if not self.cells:
            raise GridError("grid needs at least one cell")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise GridError("cell names must be unique")
        if not self.seeds:
            raise GridError("need at least one seed")
        for cell in self.cells:
            if cell.variant not in VARIANTS:
                raise GridError(f"unknown variant {cell.variant!r}")
            cell.gen.validate()
        return self


@dataclass(frozen=True)
class ResultRecord:
    rq: str
    cell: str
    seed: int
    dev_accuracy: float
    dev_ci: float
    test_accuracy: float
    test_ci: float
    seconds: float
    ok: bool = True


def spec_to_json(spec: ExperimentSpec):
    return {"rq": spec.rq, "seeds": list(spec.seeds),
            "metrics": list(spec.metrics),
            "cells": [{"name": c.name, "variant": c.variant,
                       "gen": asdict(c.gen), "train": asdict(c.train)}
                      for c in spec.cells]}


def spec_from_json(payload):
    try:
        cells = tuple(Cell(name=c["name"], variant=c.get("variant", "plain"),
                           gen=GenConfig(**c["gen"]),
                           train=TrainConfig(**c["train"]))
                      for c in payload["cells"])
        spec = ExperimentSpec(
            rq=payload["rq"], cells=cells,
            seeds=tuple(int(s) for s in payload["seeds"]),
            metrics=tuple(payload.get("metrics", ("dev_accuracy",
                                                  "test_accuracy"))))
    except (KeyError, TypeError) as exc:
        raise GridError(f"bad grid spec: {exc}") from None
    return spec.validate()


# ---------------------------------------------------------------------------
# Result records on disk

RESULT_HEADER = ("rq", "cell", "seed", "split", "accuracy", "ci", "seconds")


def save_records(records, path):
    """Write long-format rows (one per split) under the fixed header."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_HEADER)
        for r in records:
            for split, acc, ci in (("dev", r.dev_accuracy, r.dev_ci),
                                   ("test", r.test_accuracy, r.test_ci)):
                if r.ok:
                    writer.writerow([r.rq, r.cell, r.seed, split,
                                     repr(float(acc)), repr(float(ci)),
                                     repr(float(r.seconds))])
                else:
                    writer.writerow([r.rq, r.cell, r.seed, split, "", "",
                                     repr(float(r.seconds))])


def load_records(path):
    by_key = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != RESULT_HEADER:
            raise GridError(f"unexpected result header {header}")
        for rq, cell, seed, split, acc, ci, seconds in reader:
            key = (rq, cell, int(seed))
            row = by_key.setdefault(key, {"seconds": float(seconds)})
            row[split] = (float(acc) if acc else float("nan"),
                          float(ci) if ci else float("nan"), bool(acc))
    records = []
    for (rq, cell, seed), row in by_key.items():
        if "dev" not in row or "test" not in row:
            raise GridError(f"incomplete rows for cell {cell!r} seed {seed}")
        records.append(ResultRecord(
            rq=rq, cell=cell, seed=seed,
            dev_accuracy=row["dev"][0], dev_ci=row["dev"][1],
            test_accuracy=row["test"][0], test_ci=row["test"][1],
            seconds=row["seconds"], ok=row["dev"][2] and row["test"][2]))
    return records


def group_records(records):
    """Records keyed by cell name, in first-seen order."""
    groups = {}
    for r in records:
        groups.setdefault(r.cell, []).append(r)
    return groups


def cell_summary(records, split="test"):
    """Per-cell mean accuracy and seed-variance CI over successful runs."""
    out = {}
    for cell, rows in group_records(records).items():
        accs = [r.test_accuracy if split == "test" else r.dev_accuracy
                for r in rows if r.ok]
        if accs:
            out[cell] = seed_variance(accs)
    return out


# ---------------------------------------------------------------------------
# Dataset assembly per cell

def _append_tuple(dataset, tuples, gen):
    points = [replace(p, x=p.x + tuples[p.index]) for p in dataset.points]
    return tg.Dataset(split=dataset.split, points=points, config=gen)


def _task_given_datasets(gen):
    data = tg.generate_dataset(gen)
    tuples = {s.index: s.tuple for s in data["specs"]}
    wide = replace(gen, seq_len=gen.seq_len + 4)
    out = {split: _append_tuple(data[split], tuples, wide)
           for split in ("train", "dev", "test")}
    out["specs"] = data["specs"]
    return wide, out


def _unseen_eval_datasets(gen):
    """Train on alternating indices of a double-size spec draw; evaluate on
    the held-out indices, which interleave the training ones."""
    big = replace(gen, num_tasks=2 * gen.num_tasks,
                  sample_size=2 * gen.sample_size)
    specs = sorted(tg.sample_task_specs(big), key=lambda s: s.index)
    train_specs, eval_specs = specs[0::2], specs[1::2]
    train = tg.generate_split(gen, train_specs, "train", id_start=0)
    exclude = train.sequences()
    dev = tg.generate_split(gen, eval_specs, "dev", exclude=exclude,
                            id_start=len(train))
    test = tg.generate_split(gen, eval_specs, "test", exclude=exclude,
                             id_start=len(train) + len(dev))
    return gen, {"train": train, "dev": dev, "test": test,
                 "specs": train_specs}


def build_cell_datasets(cell: Cell):
    """Returns (gen config as seen by training, datasets dict)."""
    if cell.variant == "task_given":
        return _task_given_datasets(cell.gen)
    if cell.variant == "unseen_eval":
        return _unseen_eval_datasets(cell.gen)
    return cell.gen, tg.generate_dataset(cell.gen)


# ---------------------------------------------------------------------------
# Grid runner

def _ledger_path(out_dir, rq):
    return os.path.join(out_dir, f"{rq}_ledger.json")


def _write_atomic(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _load_ledger(path):
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        return json.load(f)


def _record_from_entry(rq, cell_name, seed, entry):
    if entry["status"] != "done":
        return ResultRecord(rq=rq, cell=cell_name, seed=seed,
                            dev_accuracy=float("nan"), dev_ci=float("nan"),
                            test_accuracy=float("nan"), test_ci=float("nan"),
                            seconds=entry["seconds"], ok=False)
    return ResultRecord(rq=rq, cell=cell_name, seed=seed,
                        dev_accuracy=entry["dev_accuracy"],
                        dev_ci=entry["dev_ci"],
                        test_accuracy=entry["test_accuracy"],
                        test_ci=entry["test_ci"],
                        seconds=entry["seconds"], ok=True)


def _run_cell(cell: Cell, seed, cache, max_restarts=0, log_path=None):
    """Train one (cell, seed); any exception becomes a failed ledger entry."""
    start = time.perf_counter()
    try:
        key = (cell.gen, cell.variant)
        if cache is not None and key in cache:
            built = cache[key]
        else:
            built = build_cell_datasets(cell)
            if cache is not None:
                cache[key] = built
        gen_cfg, datasets = built
        tcfg = replace(cell.train, seed=seed)
        if max_restarts:
            result, _ = tr.train_with_restarts(gen_cfg, tcfg,
                                               datasets=datasets,
                                               log_path=log_path,
                                               max_restarts=max_restarts)
        else:
            result = tr.train(gen_cfg, tcfg, datasets=datasets,
                              log_path=log_path)
        dev = tr.evaluate_result(result, datasets["dev"].points)
        test = tr.evaluate_result(result, datasets["test"].points)
        return {"status": "done",
                "dev_accuracy": dev,
                "dev_ci": binomial_ci(dev, len(datasets["dev"])),
                "test_accuracy": test,
                "test_ci": binomial_ci(test, len(datasets["test"])),
                "diverged": result.log.diverged,
                "best_epoch": result.log.best_epoch,
                "seconds": time.perf_counter() - start}
    except Exception as exc:  # noqa: BLE001 - cell isolation by contract
        return {"status": "failed",
                "error": f"{type(exc).__name__}: {exc}",
                "seconds": time.perf_counter() - start}


def _cell_job(args):
    cell, seed, max_restarts, log_path = args
    return _run_cell(cell, seed, None, max_restarts, log_path)


def _worker_count():
    try:
        return max(1, int(os.environ.get("XR_THREADS", "1")))
    except ValueError:
        return 1


def run_grid(spec: ExperimentSpec, out_dir, max_restarts=0, save_logs=True):
    """Run every (cell, seed) pair, skipping pairs already in the ledger.

    Each finished pair is flushed to the ledger immediately, so an
    interrupted grid resumes where it stopped.  Failed cells are recorded
    and do not stop the rest of the grid.
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    log_dir = os.path.join(out_dir, "logs")
    if save_logs:
        os.makedirs(log_dir, exist_ok=True)
    ledger_path = _ledger_path(out_dir, spec.rq)
    ledger = _load_ledger(ledger_path)

    pending = []
    for cell in spec.cells:
        for seed in spec.seeds:
            if f"{cell.name}::{seed}" not in ledger:
                pending.append((cell, seed))

    def log_path_for(cell, seed):
        if not save_logs:
            return None
        return os.path.join(log_dir, f"{spec.rq}-{cell.name}-s{seed}.csv")

    workers = _worker_count()
    if workers > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor
        jobs = [(cell, seed, max_restarts, log_path_for(cell, seed))
                for cell, seed in pending]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for (cell, seed), entry in zip(pending, pool.map(_cell_job, jobs)):
                ledger[f"{cell.name}::{seed}"] = entry
                _write_atomic(ledger_path, ledger)
    else:
        cache = {}
        for cell, seed in pending:
            entry = _run_cell(cell, seed, cache, max_restarts,
                              log_path_for(cell, seed))
            ledger[f"{cell.name}::{seed}"] = entry
            _write_atomic(ledger_path, ledger)

    records = [_record_from_entry(spec.rq, cell.name, seed,
                                  ledger[f"{cell.name}::{seed}"])
               for cell in spec.cells for seed in spec.seeds]
    save_records(records, os.path.join(out_dir, f"{spec.rq}_results.csv"))
    return records


# ---------------------------------------------------------------------------
# Built-in grids
#
# Desk grids shrink num-tasks and sample sizes but keep each factor
# structure; paper-scale presets keep the full levels.

DESK_GEN = GenConfig(sample_size=5000, num_tasks=50, max_value=40,
                     max_index=1000, dev_multiplier=0.4, test_multiplier=0.4,
                     explanation_kind="full_info", seed=0)
PAPER_GEN = GenConfig()

DESK_TRAIN = TrainConfig(epochs=24, batch_size=10, learning_rate=1e-3,
                         retrieval_mode="optimal", mechanism="textcat",
                         C=4, k=4, retriever_freeze_epochs=4,
                         d_model=32, n_layers=2, n_heads=2, emb_dim=8, seed=0)
PAPER_TRAIN = TrainConfig(epochs=20, batch_size=10, learning_rate=1e-3,
                          retrieval_mode="optimal", mechanism="textcat",
                          C=6, k=6, retriever_freeze_epochs=2,
                          d_model=64, n_layers=2, n_heads=2, emb_dim=16,
                          seed=0)

SCALES = ("desk", "paper")


def _base(scale):
    if scale not in SCALES:
        raise GridError(f"scale must be one of {SCALES}, got {scale!r}")
    if scale == "desk":
        return DESK_GEN, DESK_TRAIN
    return PAPER_GEN, PAPER_TRAIN


def _with_mode(train, mode, mechanism=None):
    backend = "random_fixed" if mode == "fixed" else "count_linear"
    out = replace(train, retrieval_mode=mode, encoder_backend=backend)
    if mechanism is not None:
        out = replace(out, mechanism=mechanism)
    return out


def rq1_grid(scale="desk", seeds=(0, 1, 2)):
    """Task-information availability crossed with the number of tasks."""
    gen, train = _base(scale)
    levels = (2, 5, 10, 25, 50) if scale == "desk" \
        else (2, 5, 10, 25, 100, 250, 500)
    if scale == "desk":
        gen = replace(gen, sample_size=2000, explanation_kind="full_info")
    none = replace(train, retrieval_mode="none")
    cells = []
    for condition in ("task_given", "task_signalled", "task_inferred"):
        for nt in levels:
            cell_gen = replace(gen, num_tasks=nt,
                               include_index=condition != "task_inferred")
            cells.append(Cell(
                name=f"{condition}-tasks{nt}", gen=cell_gen, train=none,
                variant="task_given" if condition == "task_given" else "plain"))
    return ExperimentSpec(rq="rq1", cells=tuple(cells), seeds=tuple(seeds))


def rq2_grid(scale="desk", seeds=(0, 1, 2), mechanisms=("textcat", "hmean")):
    """Retrieval condition (optimal/learned/fixed) crossed with the
    conditioning mechanism, plus a no-retrieval baseline."""
    gen, train = _base(scale)
    if scale == "paper":
        gen = replace(gen, explanation_kind="full_info")
    cells = [Cell(name="none", gen=gen,
                  train=replace(train, retrieval_mode="none"))]
    for mechanism in mechanisms:
        t = train
        if scale == "paper" and mechanism == "hmean":
            t = replace(t, C=4, k=4)
        for mode in ("optimal", "learned", "fixed"):
            cells.append(Cell(name=f"{mode}-{mechanism}", gen=gen,
                              train=_with_mode(t, mode, mechanism)))
    return ExperimentSpec(rq="rq2", cells=tuple(cells), seeds=tuple(seeds))


def rq3_grid(scale="desk", seeds=(0, 1, 2)):
    """Explanation kind (evidential/recomposable) crossed with retrieval."""
    gen, train = _base(scale)
    cells = [Cell(name="none", gen=replace(gen, explanation_kind="evidential"),
                  train=replace(train, retrieval_mode="none"))]
    for kind in ("evidential", "recomposable"):
        kind_gen = replace(gen, explanation_kind=kind)
        for mode in ("optimal", "learned", "fixed"):
            cells.append(Cell(name=f"{kind}-{mode}", gen=kind_gen,
                              train=_with_mode(train, mode)))
    return ExperimentSpec(rq="rq3", cells=tuple(cells), seeds=tuple(seeds))


def rq4_grid(scale="desk", seeds=(0, 1, 2)):
    """Conditioning mechanism across training-set sizes, optimal retrieval."""
    gen, train = _base(scale)
    sizes = (1000, 2500, 5000) if scale == "desk" \
        else (1000, 1500, 2500, 5000, 10000)
    train = replace(train, retrieval_mode="optimal", C=5, k=1)
    cells = []
    for mechanism in ("textcat", "hmean"):
        for size in sizes:
            cells.append(Cell(
                name=f"{mechanism}-n{size}",
                gen=replace(gen, sample_size=size),
                train=replace(train, mechanism=mechanism)))
    return ExperimentSpec(rq="rq4", cells=tuple(cells), seeds=tuple(seeds))


def rq5_grid(scale="desk", seeds=(0, 1, 2)):
    """Smooth vs. random index-to-task maps with one point per index and
    evaluation restricted to unseen indices."""
    gen, train = _base(scale)
    if scale == "desk":
        tasks, max_index = 400, 2000
    else:
        tasks, max_index = 4000, 10000
    gen = replace(gen, num_tasks=tasks, sample_size=tasks,
                  max_index=max_index, dev_multiplier=1.0,
                  test_multiplier=2.0, causal_always_mn=True)
    if scale == "paper":
        train = replace(train, epochs=25, retriever_freeze_epochs=5,
                        C=4, k=4)
    cells = []
    for smooth in (True, False):
        tag = "smooth" if smooth else "nonsmooth"
        cell_gen = replace(gen, smooth_relevance=smooth, lex_tuples=True)
        for mode in ("none", "fixed", "learned"):
            t = replace(train, retrieval_mode="none") if mode == "none" \
                else _with_mode(train, mode)
            cells.append(Cell(name=f"{tag}-{mode}", gen=cell_gen, train=t,
                              variant="unseen_eval"))
    return ExperimentSpec(rq="rq5", cells=tuple(cells), seeds=tuple(seeds))


def rq6_grid(scale="desk", seeds=(0, 1, 2), correlations=(0.0, 1.0)):
    """Strong-weak feature correlation crossed with explanation form, under
    optimal retrieval, next to a no-retrieval baseline."""
    gen, train = _base(scale)
    cells = []
    for corr in correlations:
        corr_gen = replace(gen, strong_weak_correlation=corr)
        cells.append(Cell(name=f"none-corr{corr:g}",
                          gen=replace(corr_gen, explanation_kind="full_info"),
                          train=replace(train, retrieval_mode="none")))
        for kind in ("full_info", "causal_only"):
            cells.append(Cell(
                name=f"{kind}-corr{corr:g}",
                gen=replace(corr_gen, explanation_kind=kind),
                train=replace(train, retrieval_mode="optimal")))
    return ExperimentSpec(rq="rq6", cells=tuple(cells), seeds=tuple(seeds))


def rq7_grid(scale="desk", seeds=(0, 1, 2),
             freeze_levels=(0, 4, 8, math.inf),
             sigmas=(0.0, 1e-3, 5e-3, 5e-2)):
    """Retriever freeze duration crossed with initial-retriever noise."""
    gen, train = _base(scale)
    gen = replace(gen, explanation_kind="evidential", epsilon=2)
    train = _with_mode(train, "learned")
    cells = []
    for freeze in freeze_levels:
        for sigma in sigmas:
            cells.append(Cell(
                name=f"freeze{float(freeze):g}-sigma{sigma:g}", gen=gen,
                train=replace(train, retriever_freeze_epochs=float(freeze),
                              retriever_noise_sigma=sigma)))
    return ExperimentSpec(rq="rq7", cells=tuple(cells), seeds=tuple(seeds))


def rq7_encoder_grid(scale="desk", seeds=(0, 1, 2)):
    """Retriever embedding backend crossed with learned vs. fixed retrieval.

    Only the featurized backend supports gradients, so learned cells for the
    frozen backends resolve to recorded failures rather than silent fallbacks.
    """
    gen, train = _base(scale)
    gen = replace(gen, explanation_kind="evidential", epsilon=2)
    cells = []
    for backend in ("count_linear", "random_fixed", "index_onehot"):
        for mode in ("learned", "fixed"):
            cells.append(Cell(
                name=f"{backend}-{mode}", gen=gen,
                train=replace(train, retrieval_mode=mode,
                              encoder_backend=backend)))
    return ExperimentSpec(rq="rq7enc", cells=tuple(cells), seeds=tuple(seeds))


GRIDS = {"rq1": rq1_grid, "rq2": rq2_grid, "rq3": rq3_grid, "rq4": rq4_grid,
         "rq5": rq5_grid, "rq6": rq6_grid, "rq7": rq7_grid,
         "rq7enc": rq7_encoder_grid}
