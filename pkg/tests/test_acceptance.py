"""End-to-end acceptance gates for the whole laboratory.

Each test pins one advertised guarantee: generator fidelity, the analytic
oracle pipeline, feature-strategy accuracies, CI arithmetic, exact retrieval,
gradient correctness, desk-scale training trends, evidential averaging, and
byte-level determinism.  Tolerances here are contractual; do not loosen them
to make a failing build green.
"""

import filecmp
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import test_training as tt
import xrlab.classifier as cl
import xrlab.cli as cli
import xrlab.encoder as enc
import xrlab.experiments as ex
import xrlab.retrieval as ret
import xrlab.taskgen as tg
import xrlab.training as tr

RUNS_DIR = Path(__file__).parent / "_runs"


# ---------------------------------------------------------------------------
# Generator fidelity

def test_default_dataset_generates_and_validates_in_time(tmp_path):
    cfg = tg.GenConfig(seed=0)
    start = time.perf_counter()
    data = tg.generate_dataset(cfg)
    checks = tg.validate_datasets(data, cfg, data["specs"])
    elapsed = time.perf_counter() - start
    assert all(ok for _, ok, _ in checks), [c for c in checks if not c[1]]
    assert elapsed < 30.0, f"generation+validation took {elapsed:.1f}s"

    assert len(data["train"]) == 5000
    assert len(data["dev"]) == 10000
    assert len(data["test"]) == 50000
    assert len(data["specs"]) == 500
    per_index = {}
    for p in data["train"].points:
        per_index[p.index] = per_index.get(p.index, 0) + 1
    assert set(per_index.values()) == {10}

    # the same invariants must hold through the CLI round trip
    for split in tg.SPLITS:
        tg.save_split(data[split], tmp_path / f"{split}.jsonl")
    tg.save_meta(cfg, data["specs"], tmp_path / "meta.json")
    assert cli.main(["validate", str(tmp_path)]) == 0


# ---------------------------------------------------------------------------
# Analytic oracle pipeline

def test_oracle_pipeline_perfect_on_full_test_split(default_data):
    cfg, data = default_data
    table = ret.build_optimal_index(data["train"])
    acc = tr.evaluate_oracle(data["test"].points, table, C=4)
    assert acc == 1.0


def test_or_features_strategy_scores_three_quarters(default_data):
    cfg, data = default_data
    acc = ex.strategy_accuracy_oracle(data["test"], "or_features")
    n = len(data["test"].points)
    assert n == 50000
    assert abs(acc - 0.75) <= ex.binomial_ci(0.75, n)


def test_binomial_ci_matches_reported_value():
    assert ex.binomial_ci(0.90, 50000) == pytest.approx(0.0026, abs=1e-4)


# ---------------------------------------------------------------------------
# Exact retrieval vs. brute force

def _random_store(rng):
    n = int(rng.integers(500, 5001))
    emb = rng.integers(-2, 3, size=(n, 8)).astype(float)
    dup = rng.integers(0, n, size=n // 10)
    emb[dup] = emb[(dup + 7) % n]  # exact duplicate rows force full ties
    owners = rng.integers(0, max(2, n // 3), size=n)
    ids = rng.permutation(n)
    entries = [ret.Entry(int(ids[i]), int(owners[i]), (i,)) for i in range(n)]
    return ret.ExplanationStore(
        entries=entries, feats=None, embeddings=emb,
        owner_ids=owners.astype(np.int64), expl_ids=ids.astype(np.int64))


def test_topk_matches_bruteforce_on_random_stores():
    rng = np.random.default_rng(11)
    for trial in range(100):
        store = _random_store(rng)
        q = rng.integers(-2, 3, size=8).astype(float)
        exclude = int(store.owner_ids[rng.integers(len(store))])
        count = int(rng.integers(1, 25))

        got, scores = ret.topk(store, q, count, exclude_owner=exclude)

        sims = store.embeddings @ q
        valid = [i for i in range(len(store)) if store.owner_ids[i] != exclude]
        want = sorted(valid, key=lambda i: (-sims[i], store.expl_ids[i]))[:count]
        assert [e.explanation_id for e in got] == \
            [int(store.expl_ids[i]) for i in want], f"store {trial}"
        assert list(scores) == [sims[i] for i in want]

    n_valid = int((store.owner_ids != exclude).sum())
    with pytest.raises(ret.RetrievalError):
        ret.topk(store, q, n_valid + 1, exclude_owner=exclude)


# ---------------------------------------------------------------------------
# Gradient correctness

@pytest.fixture(scope="module")
def grad_data():
    return tg.generate_dataset(tt.TINY_EV)


@pytest.mark.parametrize("mechanism,k", [("textcat", 1), ("textcat", 3),
                                         ("hmean", 1), ("hmean", 3)])
def test_marginal_gradients_match_finite_differences(grad_data, mechanism, k):
    cp, ep, store, batch = tt._mixed_setup(grad_data, mechanism, k)
    value, grads, d_proj = tr.loss_and_grads(cp, batch, mechanism,
                                             enc_params=ep)
    assert math.isfinite(value)

    rng = np.random.default_rng(7)
    h = 1e-6
    worst = 0.0
    for name, arr in cp.params.items():
        flat = arr.reshape(-1)
        for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            lp = tr.loss(cp, batch, mechanism)
            flat[idx] = old - h
            lm = tr.loss(cp, batch, mechanism)
            flat[idx] = old
            worst = max(worst, tt._rel_err((lp - lm) / (2 * h),
                                           grads[name].reshape(-1)[idx]))
    flat = ep.projection.reshape(-1)
    for idx in rng.choice(flat.size, size=16, replace=False):
        old = flat[idx]
        flat[idx] = old + h
        lp = tr.loss(cp, tr.refresh_queries(batch, ep), mechanism)
        flat[idx] = old - h
        lm = tr.loss(cp, tr.refresh_queries(batch, ep), mechanism)
        flat[idx] = old
        worst = max(worst, tt._rel_err((lp - lm) / (2 * h),
                                       d_proj.reshape(-1)[idx]))
    assert worst < 1e-4


def test_stop_gradient_dual_path_agreement(grad_data):
    tt.test_stop_gradient_dual_path(grad_data)


# ---------------------------------------------------------------------------
# Desk-scale training trends

def _desk_spec():
    base = ex.DESK_TRAIN
    gen = ex.DESK_GEN
    cells = (
        ex.Cell("none", gen, replace(base, retrieval_mode="none")),
        ex.Cell("fixed", gen, replace(base, retrieval_mode="fixed",
                                      encoder_backend="random_fixed")),
        ex.Cell("learned", gen, replace(base, retrieval_mode="learned")),
        ex.Cell("optimal", gen, replace(base, retrieval_mode="optimal")),
        ex.Cell("nofreeze", gen, replace(base, retrieval_mode="learned",
                                         retriever_freeze_epochs=0)),
    )
    return ex.ExperimentSpec(rq="desk", cells=cells, seeds=(0, 1, 2))


@pytest.fixture(scope="session")
def desk_records():
    spec = _desk_spec()
    records = ex.run_grid(spec, RUNS_DIR / "desk")
    return spec, {(r.cell, r.seed): r for r in records}


def _mean_test_acc(by_key, cell, seeds):
    accs = []
    for s in seeds:
        rec = by_key[(cell, s)]
        assert rec.ok, f"{cell} seed {s} failed"
        accs.append(rec.test_accuracy)
    return sum(accs) / len(accs)


def test_desk_retrieval_ordering_and_margins(desk_records):
    spec, by_key = desk_records
    mean = {c.name: _mean_test_acc(by_key, c.name, spec.seeds)
            for c in spec.cells if c.name != "nofreeze"}
    shown = {k: round(v, 4) for k, v in mean.items()}
    assert mean["optimal"] - mean["none"] >= 0.10, shown
    assert mean["learned"] - mean["fixed"] >= 0.03, shown
    assert mean["optimal"] >= mean["learned"], shown
    assert mean["learned"] > mean["fixed"], shown
    assert mean["fixed"] > mean["none"], shown


def test_desk_joint_training_from_start_underperforms(desk_records):
    spec, by_key = desk_records
    wins = 0
    finals = []
    for seed in spec.seeds:
        final = {}
        for name in ("learned", "nofreeze"):
            log = tr.load_log(RUNS_DIR / "desk" / "logs"
                              / f"desk-{name}-s{seed}.csv")
            final[name] = log.rows[-1].dev_acc
        finals.append(final)
        wins += int(final["nofreeze"] < final["learned"])
    assert wins >= 2, finals


# ---------------------------------------------------------------------------
# Evidential averaging

def test_evidential_averaging_reconstructs_tuples(default_data):
    cfg, data = default_data
    rng = np.random.default_rng(2026)
    recovered = {}
    for spec in data["specs"]:
        pool = tg.make_explanations(spec, "evidential", 100, rng, epsilon=2)
        mean = np.mean([e.tokens[1:5] for e in pool], axis=0)
        guess = tuple(int(np.floor(v + 0.5)) for v in mean)
        recovered[spec.index] = (guess == spec.tuple, pool)
    rate = sum(ok for ok, _ in recovered.values()) / len(recovered)
    assert rate >= 0.99, f"only {rate:.3f} of indices reconstructed"

    # and the interpreter reaches the right label through those averages
    checked = 0
    for p in data["train"].points:
        ok, pool = recovered[p.index]
        if not ok:
            continue
        tokens = [e.tokens for e in pool]
        assert cl.oracle_interpret(p.x, tokens, kind="evidential") == p.y
        checked += 1
        if checked >= 200:
            break
    assert checked == 200


# ---------------------------------------------------------------------------
# Determinism

RERUN_GEN = {"sample_size": 120, "num_tasks": 12, "max_index": 300,
             "max_value": 40, "dev_multiplier": 0.5, "test_multiplier": 0.5,
             "explanation_kind": "evidential"}
RERUN_TRAIN = {"epochs": 2, "batch_size": 10, "d_model": 16, "n_layers": 1,
               "n_heads": 2, "emb_dim": 8, "retrieval_mode": "learned",
               "C": 2, "k": 2, "retriever_freeze_epochs": 1}


def test_rerun_byte_identity_datasets_and_logs(tmp_path):
    import json

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"gen": RERUN_GEN, "train": RERUN_TRAIN}))
    paths = {}
    for tag in ("a", "b"):
        data_dir = tmp_path / f"data_{tag}"
        run_dir = tmp_path / f"run_{tag}"
        assert cli.main(["generate", "--config", str(cfg_path),
                         "--out", str(data_dir), "--seed", "3"]) == 0
        assert cli.main(["train", "--config", str(cfg_path),
                         "--data", str(data_dir),
                         "--out", str(run_dir), "--seed", "3"]) == 0
        paths[tag] = (data_dir, run_dir)

    (data_a, run_a), (data_b, run_b) = paths["a"], paths["b"]
    for name in ["train.jsonl", "dev.jsonl", "test.jsonl", "meta.json"]:
        assert filecmp.cmp(data_a / name, data_b / name, shallow=False), name
    assert filecmp.cmp(run_a / "train_log.csv", run_b / "train_log.csv",
                       shallow=False)
