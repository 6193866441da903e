import numpy as np
import pytest

from xrlab import classifier as cl
from xrlab import retrieval as rt
from xrlab import taskgen as tg


def mkset(tokens_list, prob=1.0):
    entries = [rt.Entry(i, 1000 + i, tuple(t)) for i, t in enumerate(tokens_list)]
    return rt.RetrievedSet(explanations=entries, raw_score=0.0,
                           normalized_prob=prob)


@pytest.fixture(scope="module")
def small_classifier():
    return cl.init_classifier(vocab_max=200, max_len=64, d_model=16,
                              n_layers=1, n_heads=2, seed=0)


X = tuple([150, 1] + [5, 5, 9, 30, 40] + [11] * 13)
EXPL = (150, 5, 9, 30, 40)


def test_textcat_input_layout():
    s = mkset([EXPL] * 6)
    seq = cl.textcat_input(tuple(range(100, 120)), s)
    assert len(seq) == 20 + 1 + 6 * (5 + 1)
    assert seq.count(tg.SEP_TOKEN) == 7
    assert seq[:20] == tuple(range(100, 120))
    assert seq[20] == tg.SEP_TOKEN


def test_textcat_input_no_explanations():
    seq = cl.textcat_input(X, mkset([]))
    assert seq == X + (tg.SEP_TOKEN,)


def test_textcat_orders_explanations_as_ranked():
    s = mkset([(150, 1, 2, 3, 4), (150, 9, 8, 7, 6)])
    seq = cl.textcat_input((150, 1), s)
    assert seq == (150, 1, 0, 150, 1, 2, 3, 4, 0, 150, 9, 8, 7, 6, 0)


def test_predict_probabilities_sum_to_one(small_classifier):
    probs = cl.predict_textcat(small_classifier, X, mkset([EXPL] * 3))
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert (probs >= 0).all()


def test_zeroed_head_gives_uniform_prediction(small_classifier):
    cp = small_classifier
    saved = {k: cp.params[k].copy() for k in ("head.w2", "head.b2")}
    cp.params["head.w2"][:] = 0.0
    cp.params["head.b2"][:] = 0.0
    try:
        probs = cl.predict_textcat(cp, X, mkset([EXPL]))
        assert probs == pytest.approx([0.5, 0.5], abs=1e-12)
    finally:
        cp.params.update(saved)


def test_non_finite_forward_raises(small_classifier):
    cp = small_classifier
    saved = cp.params["head.b2"].copy()
    cp.params["head.b2"][:] = np.inf
    try:
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            cl.predict_textcat(cp, X, mkset([EXPL]))
    finally:
        cp.params["head.b2"] = saved


def test_hmean_single_explanation_equals_textcat(small_classifier):
    s = mkset([EXPL])
    a = cl.predict_textcat(small_classifier, X, s)
    b = cl.predict_hmean(small_classifier, X, s)
    assert a == pytest.approx(b, abs=1e-12)


def test_hmean_permutation_invariant(small_classifier):
    e1, e2, e3 = (150, 5, 9, 30, 40), (150, 6, 9, 30, 40), (150, 5, 8, 30, 40)
    a = cl.predict_hmean(small_classifier, X, mkset([e1, e2, e3]))
    b = cl.predict_hmean(small_classifier, X, mkset([e3, e1, e2]))
    assert a == pytest.approx(b, abs=1e-12)


def test_hmean_duplication_invariant(small_classifier):
    e1, e2 = (150, 5, 9, 30, 40), (150, 6, 9, 30, 40)
    a = cl.predict_hmean(small_classifier, X, mkset([e1, e2]))
    b = cl.predict_hmean(small_classifier, X, mkset([e1, e2, e1, e2]))
    assert a == pytest.approx(b, abs=1e-12)


def test_marginal_single_set_is_identity(small_classifier):
    s = mkset([EXPL] * 2, prob=1.0)
    a = cl.marginal_predict(small_classifier, X, [s], "textcat")
    b = cl.predict_textcat(small_classifier, X, s)
    assert a == pytest.approx(b, abs=1e-12)


def test_marginal_mixture_arithmetic(monkeypatch, small_classifier):
    outputs = [np.array([0.8, 0.2]), np.array([0.4, 0.6])]
    monkeypatch.setattr(cl, "predict_textcat",
                        lambda cp, x, s: outputs.pop(0))
    sets = [mkset([EXPL], prob=0.5), mkset([EXPL], prob=0.5)]
    probs = cl.marginal_predict(small_classifier, X, sets, "textcat")
    assert probs == pytest.approx([0.6, 0.4], abs=1e-12)


def test_marginal_is_distribution_on_random_sets(small_classifier):
    rng = np.random.default_rng(0)
    for _ in range(5):
        k = int(rng.integers(1, 4))
        raw = rng.random(k)
        probs = raw / raw.sum()
        sets = [mkset([EXPL, (150, 6, 9, 31, 41)], prob=float(p))
                for p in probs]
        out = cl.marginal_predict(small_classifier, X, sets, "hmean")
        assert out.sum() == pytest.approx(1.0, abs=1e-9)


# ---------------------------------------------------------------------------
# Oracle interpreter

def test_oracle_full_info_matches_generated_labels(small_data):
    _, data = small_data
    by_index = {s.index: s for s in data["specs"]}
    for p in data["train"].points[:200]:
        spec = by_index[p.index]
        label = cl.oracle_interpret(p.x, [(spec.index, spec.m, spec.n,
                                           spec.r, spec.d)])
        assert label == p.y


def test_oracle_requires_matching_index():
    with pytest.raises(cl.NoRelevantExplanation):
        cl.oracle_interpret(X, [(151, 5, 9, 30, 40)])


def test_oracle_recomposable_reconstruction():
    pieces = [(150, 5, 0, 30, 0), (150, 0, 9, 0, 40)]
    assert cl.oracle_interpret(X, pieces) == 1  # two 5s vs one 9
    x2 = tuple([150, 2] + list(X[2:]))
    assert cl.oracle_interpret(x2, pieces) == 0  # one 30 vs one 40


def test_oracle_recomposable_missing_piece():
    with pytest.raises(cl.IncompleteEvidence):
        cl.oracle_interpret(X, [(150, 5, 0, 30, 0)])


def test_oracle_evidential_averaging_recovers_tuple():
    rng = np.random.default_rng(1)
    spec = tg.TaskSpec(150, 5, 9, 30, 40)
    expls = tg.make_explanations(spec, "evidential", 60, rng, epsilon=2)
    label = cl.oracle_interpret(X, [e.tokens for e in expls], kind="evidential")
    assert label == 1


def test_oracle_causal_only_votes():
    assert cl.oracle_interpret(X, [(150, 5, 9)]) == 1
    assert cl.oracle_interpret(X, [(150, 9, 5)]) == 0
    assert cl.oracle_interpret(X, [(150, 5, 9), (150, 5, 9), (150, 9, 5)]) == 1


def test_oracle_label_flips_under_token_swap(small_data):
    # Swapping the two causal integers inside x (explanation unchanged)
    # exchanges their counts, so the oracle label flips.
    _, data = small_data
    by_index = {s.index: s for s in data["specs"]}
    flipped = 0
    for p in data["train"].points[:50]:
        spec = by_index[p.index]
        expl = (spec.index, spec.m, spec.n, spec.r, spec.d)
        label = cl.oracle_interpret(p.x, [expl])
        if p.indicator == 1:
            swap = {spec.m: spec.n, spec.n: spec.m}
        else:
            swap = {spec.r: spec.d, spec.d: spec.r}
        if p.x[0] in swap or p.x[1] in swap:
            continue  # swap may not touch the index/indicator slots
        swapped_x = tuple(swap.get(t, t) for t in p.x)
        assert cl.oracle_interpret(swapped_x, [expl]) == 1 - label
        flipped += 1
    assert flipped >= 20


def test_classifier_checkpoint_round_trip(tmp_path, small_classifier):
    path = tmp_path / "clf.npz"
    cl.save_classifier(small_classifier, path)
    loaded = cl.load_classifier(path)
    assert loaded.cfg == small_classifier.cfg
    assert loaded.token_floor == small_classifier.token_floor
    probs_a = cl.predict_textcat(small_classifier, X, mkset([EXPL]))
    probs_b = cl.predict_textcat(loaded, X, mkset([EXPL]))
    assert probs_a == pytest.approx(probs_b, abs=0)
