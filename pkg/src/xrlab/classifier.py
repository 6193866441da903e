"""Prediction over an input sequence and its retrieved explanation sets.

Two conditioning mechanisms share one trainable encoder: TextCat concatenates
the input and all C explanations of a set into a single sequence; H-Mean
encodes the input with each explanation separately and averages the C pooled
representations before the head.  Either way the k retrieved sets are
marginalized with their normalized probabilities.

A deterministic oracle interpreter reads retrieved explanations analytically
and is used to validate the pipeline end to end.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .taskgen import SEP_TOKEN, TOKEN_FLOOR


class NoRelevantExplanation(Exception):
    """No retrieved explanation matches the query's index."""


class IncompleteEvidence(Exception):
    """Recomposable pieces cannot reconstruct the needed pair."""


@dataclass
class ClassifierParams:
    cfg: nn.ModelConfig
    params: dict
    token_floor: int = TOKEN_FLOOR

    def rows(self, tokens):
        out = np.asarray(tokens, dtype=np.int64) - self.token_floor
        if out.min(initial=0) < 0 or out.max(initial=0) >= self.cfg.vocab_rows:
            raise ValueError("token outside classifier vocabulary")
        return out


def init_classifier(vocab_max, max_len, d_model=64, n_layers=2, n_heads=2,
                    head_hidden=0, seed=0, token_floor=TOKEN_FLOOR):
    cfg = nn.ModelConfig(vocab_rows=vocab_max - token_floor + 1,
                         max_len=max_len, d_model=d_model, n_layers=n_layers,
                         n_heads=n_heads, head_hidden=head_hidden)
    params = nn.init_params(cfg, np.random.default_rng(seed))
    return ClassifierParams(cfg=cfg, params=params, token_floor=token_floor)


def _set_tokens(retrieved_set):
    return [e.tokens for e in retrieved_set.explanations]


def textcat_input(x, retrieved_set):
    """[x, SEP, e_1, SEP, ..., e_C, SEP], explanations in retrieval order."""
    tokens = list(x) + [SEP_TOKEN]
    for e_tokens in _set_tokens(retrieved_set):
        tokens.extend(e_tokens)
        tokens.append(SEP_TOKEN)
    return tuple(tokens)


def hmean_inputs(x, retrieved_set):
    """One [x, SEP, e_c, SEP] sequence per explanation."""
    return [tuple(list(x) + [SEP_TOKEN] + list(e_tokens) + [SEP_TOKEN])
            for e_tokens in _set_tokens(retrieved_set)]


def _forward_probs(cp: ClassifierParams, sequences):
    rows = np.stack([cp.rows(s) for s in sequences])
    pooled, _ = nn.encode_pooled(cp.params, cp.cfg, rows)
    logits, _ = nn.head_forward(cp.params, pooled)
    return nn.softmax(logits)


def predict_textcat(cp: ClassifierParams, x, retrieved_set):
    probs = _forward_probs(cp, [textcat_input(x, retrieved_set)])[0]
    _check_distribution(probs)
    return probs


def predict_hmean(cp: ClassifierParams, x, retrieved_set):
    seqs = hmean_inputs(x, retrieved_set)
    if not seqs:
        raise ValueError("H-Mean needs at least one explanation")
    rows = np.stack([cp.rows(s) for s in seqs])
    pooled, _ = nn.encode_pooled(cp.params, cp.cfg, rows)
    logits, _ = nn.head_forward(cp.params, pooled.mean(axis=0, keepdims=True))
    probs = nn.softmax(logits)[0]
    _check_distribution(probs)
    return probs


def marginal_predict(cp: ClassifierParams, x, sets, mechanism="textcat"):
    """Probability-weighted mixture of per-set predictions."""
    predict = {"textcat": predict_textcat, "hmean": predict_hmean}[mechanism]
    out = np.zeros(2)
    for s in sets:
        out += s.normalized_prob * predict(cp, x, s)
    _check_distribution(out)
    return out


def _check_distribution(probs):
    if not np.isfinite(probs).all():
        raise FloatingPointError("non-finite prediction")
    if abs(probs.sum() - 1.0) > 1e-9:
        raise FloatingPointError("prediction does not sum to 1")


# ---------------------------------------------------------------------------
# Oracle interpreter

def _infer_kind(tokens):
    if len(tokens) == 3:
        return "causal_only"
    if any(v == 0 for v in tokens[1:]):
        return "recomposable"
    return "full_info"


def oracle_interpret(x, explanations, kind=None):
    """Analytic label from retrieved explanations.

    Matching explanations (index slot equal to x[0]) are combined per kind:
    full-info/evidential tuples are averaged slot-wise and rounded,
    recomposable pieces merged, causal-only pairs majority-voted.  The label
    is then 1 iff the causal member out-counts its partner in x.
    """
    tokens_list = [tuple(e) for e in explanations]
    matching = [t for t in tokens_list if t[0] == x[0]]
    if not matching:
        raise NoRelevantExplanation(f"no explanation for index {x[0]}")
    if kind is None:
        kind = _infer_kind(matching[0])

    seq = list(x)
    if kind == "causal_only":
        votes = [int(seq.count(t[1]) > seq.count(t[2])) for t in matching]
        return int(sum(votes) * 2 > len(votes)) if votes else 0

    if kind == "recomposable":
        slots = [0, 0, 0, 0]
        for t in matching:
            for s in range(1, 5):
                if t[s] != 0:
                    slots[s - 1] = t[s]
        need = (0, 1) if x[1] == 1 else (2, 3)
        if slots[need[0]] == 0 or slots[need[1]] == 0:
            raise IncompleteEvidence(f"missing pieces for index {x[0]}")
        a, b = slots[need[0]], slots[need[1]]
        return int(seq.count(a) > seq.count(b))

    # full_info / evidential: slot-wise average, rounded half-up
    mean = np.mean([t[1:5] for t in matching], axis=0)
    m, n, r, d = (int(np.floor(v + 0.5)) for v in mean)
    a, b = (m, n) if x[1] == 1 else (r, d)
    return int(seq.count(a) > seq.count(b))


# ---------------------------------------------------------------------------
# Checkpoints

def save_classifier(cp: ClassifierParams, path):
    meta = {"vocab_rows": cp.cfg.vocab_rows, "max_len": cp.cfg.max_len,
            "d_model": cp.cfg.d_model, "n_layers": cp.cfg.n_layers,
            "n_heads": cp.cfg.n_heads, "d_ff": cp.cfg.d_ff,
            "head_hidden": cp.cfg.head_hidden, "n_classes": cp.cfg.n_classes,
            "token_floor": cp.token_floor}
    nn.save_params(path, cp.params, meta)


def load_classifier(path):
    params, meta = nn.load_params(path)
    floor = meta.pop("token_floor")
    return ClassifierParams(cfg=nn.ModelConfig(**meta), params=params,
                            token_floor=floor)
