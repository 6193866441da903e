"""Sequence encoders for retrieval scoring.

Sequences are mapped to unit-norm embeddings so inner products are cosines.
Features are bag-of-token multiplicities plus dedicated one-hot blocks for the
first two positions, which lets a linear projection learn exact index matching
instead of confusing the index with high-count fillers.

Backends: count_linear (trainable projection), random_fixed (same init
procedure, frozen, own seed), and index_onehot (diagnostic: embedding is the
normalized one-hot of the first token).
"""

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .taskgen import TOKEN_FLOOR

BACKENDS = ("count_linear", "random_fixed", "index_onehot")

# Init scales per feature block.  All blocks start small and equal: a fresh
# projection ranks mostly by count overlap (raw counts dwarf the one-hot
# blocks), which makes a frozen random encoder a usable-but-noisy retriever,
# while exact index matching has to be learned through the index block.
COUNT_SCALE = 0.020
INDEX_SCALE = 0.020
INDICATOR_SCALE = 0.020


class EncodingError(ValueError):
    pass


@dataclass
class EncoderParams:
    backend: str
    vocab_max: int
    emb_dim: int = 16
    token_floor: int = TOKEN_FLOOR
    projection: np.ndarray = None

    @property
    def span(self):
        """Distinct token values covered: [token_floor, vocab_max]."""
        return self.vocab_max - self.token_floor + 1

    @property
    def feature_dim(self):
        return 3 * self.span

    @property
    def trainable(self):
        return self.backend == "count_linear"

    @property
    def out_dim(self):
        return self.span if self.backend == "index_onehot" else self.emb_dim


def init_encoder(backend, vocab_max, emb_dim=16, seed=0,
                 count_scale=COUNT_SCALE, index_scale=INDEX_SCALE,
                 indicator_scale=INDICATOR_SCALE):
    if backend not in BACKENDS:
        raise EncodingError(f"unknown backend {backend!r}")
    params = EncoderParams(backend=backend, vocab_max=vocab_max,
                           emb_dim=emb_dim)
    if backend != "index_onehot":
        rng = np.random.default_rng(seed)
        span = params.span
        proj = np.empty((3 * span, emb_dim))
        proj[:span] = count_scale * rng.standard_normal((span, emb_dim))
        proj[span:2 * span] = index_scale * rng.standard_normal((span, emb_dim))
        proj[2 * span:] = indicator_scale * rng.standard_normal((span, emb_dim))
        params.projection = proj
    return params


def _coord(params, value):
    if value < params.token_floor or value > params.vocab_max:
        raise EncodingError(f"token {value} outside "
                            f"[{params.token_floor}, {params.vocab_max}]")
    return value - params.token_floor


def count_features(params: EncoderParams, tokens):
    """Sparse feature vector: (indices, values, dim).

    Block 0 holds token multiplicities over the whole sequence; blocks 1 and 2
    hold one-hots of tokens[0] and tokens[1].
    """
    span = params.span
    counts = {}
    for t in tokens:
        c = _coord(params, t)
        counts[c] = counts.get(c, 0) + 1
    indices = list(counts)
    values = [float(counts[c]) for c in indices]
    if len(tokens) >= 1:
        indices.append(span + _coord(params, tokens[0]))
        values.append(1.0)
    if len(tokens) >= 2:
        indices.append(2 * span + _coord(params, tokens[1]))
        values.append(1.0)
    return np.asarray(indices, dtype=np.int64), np.asarray(values), 3 * span


def features_matrix(params: EncoderParams, sequences):
    """CSR matrix of count features, one row per sequence."""
    data, cols, indptr = [], [], [0]
    for tokens in sequences:
        idx, vals, _ = count_features(params, tokens)
        cols.extend(idx)
        data.extend(vals)
        indptr.append(len(cols))
    return sp.csr_matrix((data, cols, indptr),
                         shape=(len(sequences), params.feature_dim))


def _normalize_rows(mat):
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise EncodingError("zero-norm embedding")
    return mat / norms


def embed_matrix(params: EncoderParams, feats):
    """Embed pre-computed feature rows; rows come out unit-norm."""
    if params.backend == "index_onehot":
        block = feats[:, params.span:2 * params.span]
        return _normalize_rows(np.asarray(block.todense(), dtype=float))
    return _normalize_rows(feats @ params.projection)


def embed(params: EncoderParams, tokens):
    return embed_sequences(params, [tokens])[0]


def embed_sequences(params: EncoderParams, sequences):
    return embed_matrix(params, features_matrix(params, sequences))


def similarity(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise EncodingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


# ---------------------------------------------------------------------------
# Gradients (count_linear only)

def embed_with_cache(params: EncoderParams, tokens):
    """Forward pass retaining what the backward pass needs."""
    if not params.trainable:
        raise EncodingError("gradients only flow through count_linear")
    indices, values, _ = count_features(params, tokens)
    raw = values @ params.projection[indices]
    norm = np.linalg.norm(raw)
    if norm < 1e-12:
        raise EncodingError("zero-norm embedding")
    emb = raw / norm
    return emb, (indices, values, emb, 1.0 / norm)


def embed_backward(cache, d_emb, grad_proj):
    """Accumulate d(loss)/d(projection) into grad_proj for one embedding."""
    indices, values, emb, inv_norm = cache
    d_raw = (d_emb - emb * (emb @ d_emb)) * inv_norm
    np.add.at(grad_proj, indices, values[:, None] * d_raw[None, :])


# ---------------------------------------------------------------------------
# Checkpoints

def save_encoder(params: EncoderParams, path):
    meta = json.dumps({"backend": params.backend, "vocab_max": params.vocab_max,
                       "emb_dim": params.emb_dim,
                       "token_floor": params.token_floor})
    proj = params.projection if params.projection is not None else np.zeros(0)
    np.savez(path, meta=np.frombuffer(meta.encode(), dtype=np.uint8),
             projection=proj)


def load_encoder(path):
    blob = np.load(path if str(path).endswith(".npz") else str(path) + ".npz")
    meta = json.loads(bytes(blob["meta"]).decode())
    proj = blob["projection"]
    params = EncoderParams(backend=meta["backend"],
                           vocab_max=meta["vocab_max"],
                           emb_dim=meta["emb_dim"],
                           token_floor=meta["token_floor"])
    if proj.size:
        params.projection = proj
    return params
