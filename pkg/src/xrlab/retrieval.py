"""Explanation store and exact top-k retrieval.

The store keeps one embedding per training explanation and answers exact
maximum-inner-product queries with the query's own explanation excluded.  The
top C*k results are chunked into k sets of C; a truncated softmax over the k
summed-similarity scores gives each set's probability.  Corpora here are small
enough that exact search is the only sensible choice.
"""

from dataclasses import dataclass
from typing import NamedTuple

import json
import numpy as np

from . import encoder as enc


class RetrievalError(ValueError):
    pass


class Entry(NamedTuple):
    explanation_id: int
    owner_id: int
    tokens: tuple


@dataclass
class RetrievedSet:
    explanations: list  # C entries, descending per-explanation score
    raw_score: float
    normalized_prob: float


@dataclass
class ExplanationStore:
    entries: list
    feats: object  # cached sparse features, reused across rebuilds
    embeddings: np.ndarray
    owner_ids: np.ndarray
    expl_ids: np.ndarray
    generation_stamp: int = 0

    def __len__(self):
        return len(self.entries)


def iter_explanations(dataset):
    """Canonical explanation enumeration: point order, ids 0..N-1."""
    out = []
    for p in dataset.points:
        if p.e is None:
            continue
        out.append(Entry(len(out), p.id, tuple(p.e.tokens)))
    return out


def build_store(dataset, params: enc.EncoderParams):
    entries = iter_explanations(dataset)
    feats = enc.features_matrix(params, [e.tokens for e in entries])
    embeddings = (enc.embed_matrix(params, feats) if entries
                  else np.zeros((0, params.out_dim)))
    return ExplanationStore(
        entries=entries, feats=feats, embeddings=embeddings,
        owner_ids=np.array([e.owner_id for e in entries], dtype=np.int64),
        expl_ids=np.array([e.explanation_id for e in entries], dtype=np.int64),
        generation_stamp=0)


def rebuild(store: ExplanationStore, params: enc.EncoderParams):
    """Re-encode every entry with current params; bumps the generation stamp."""
    if len(store):
        store.embeddings = enc.embed_matrix(params, store.feats)
    store.generation_stamp += 1


def topk(store: ExplanationStore, query_emb, count, exclude_owner=None):
    """Exact top-`count` by similarity, ties by ascending explanation id.

    Returns (entries, scores) in rank order; entries owned by exclude_owner
    never appear.
    """
    sims = store.embeddings @ np.asarray(query_emb)
    if exclude_owner is None:
        valid = np.arange(len(store))
    else:
        valid = np.flatnonzero(store.owner_ids != exclude_owner)
    if count > len(valid):
        raise RetrievalError(
            f"requested {count} results but only {len(valid)} retrievable")
    order = np.lexsort((store.expl_ids[valid], -sims[valid]))[:count]
    take = valid[order]
    return [store.entries[i] for i in take], sims[take]


def _softmax(scores):
    z = np.exp(scores - scores.max())
    return z / z.sum()


def allocate_sets(entries, scores, C, k):
    """Chunk Ck ranked explanations into k sets of C with softmax set probs."""
    if len(entries) != C * k or len(scores) != C * k:
        raise RetrievalError(f"expected {C * k} ranked entries, got {len(entries)}")
    scores = np.asarray(scores, dtype=float)
    raw = scores.reshape(k, C).sum(axis=1)
    probs = _softmax(raw)
    return [RetrievedSet(explanations=list(entries[j * C:(j + 1) * C]),
                         raw_score=float(raw[j]),
                         normalized_prob=float(probs[j]))
            for j in range(k)]


def retrieve_sets(store, query_emb, C, k, exclude_owner=None):
    entries, scores = topk(store, query_emb, C * k, exclude_owner)
    return allocate_sets(entries, scores, C, k)


def build_optimal_index(dataset):
    """Index-keyed explanation table for the oracle retriever."""
    table = {}
    entries = iter_explanations(dataset)
    by_id = {p.id: p.index for p in dataset.points}
    for e in entries:
        table.setdefault(by_id[e.owner_id], []).append(e)
    return table


def optimal_retrieve(index_table, query_index, query_id, C, k):
    """k uniform-probability sets of C same-index explanations, self excluded."""
    candidates = [e for e in index_table.get(query_index, ())
                  if e.owner_id != query_id]
    if C * k > len(candidates):
        raise RetrievalError(
            f"index {query_index}: need {C * k} matching explanations, "
            f"have {len(candidates)}")
    return [RetrievedSet(explanations=candidates[j * C:(j + 1) * C],
                         raw_score=0.0, normalized_prob=1.0 / k)
            for j in range(k)]


def save_store(store: ExplanationStore, path):
    with open(path, "w") as f:
        for e in store.entries:
            f.write(json.dumps({"explanation_id": e.explanation_id,
                                "owner_id": e.owner_id,
                                "tokens": list(e.tokens)},
                               separators=(",", ":")))
            f.write("\n")
