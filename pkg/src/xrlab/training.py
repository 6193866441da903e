"""End-to-end training of the classifier and retrieval encoder.

The objective is the marginal cross-entropy -log sum_j q_j p(y|x, E_j) over k
retrieved sets.  Retrieval follows a stop-gradient contract: explanation
embeddings live in a store that is only re-encoded at scheduled rebuilds,
queries are embedded live, and retrieval learning therefore flows through the
query side alone.  Set probabilities are a softmax over summed query-document
inner products; the classifier reads each set through TextCat (one
concatenated sequence) or H-Mean (mean of per-explanation poolings).
"""

import json
import math
import time
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np

from . import classifier as cl
from . import encoder as enc
from . import nn
from . import retrieval as ret
from .taskgen import MAX_EPSILON, SEP_TOKEN, ConfigError, GenConfig, generate_dataset

RETRIEVAL_MODES = ("none", "fixed", "learned", "optimal")
MECHANISMS = ("textcat", "hmean", "oracle")

_SHUFFLE_STREAM = 11
_NOISE_STREAM = 23


def _stream(seed, *key):
    return np.random.default_rng([int(seed), *map(int, key)])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 10
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.01
    retrieval_mode: str = "learned"
    mechanism: str = "textcat"
    C: int = 4
    k: int = 4
    retriever_freeze_epochs: float = 0
    rebuild_every_fraction: float = 0.2
    retriever_noise_sigma: float = 0.0
    encoder_backend: str = "count_linear"
    emb_dim: int = 16
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    head_hidden: int = 0
    seed: int = 0

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.retrieval_mode not in RETRIEVAL_MODES:
            raise ConfigError(f"unknown retrieval_mode {self.retrieval_mode!r}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"unknown mechanism {self.mechanism!r}")
        if self.retrieval_mode != "none" and (self.C < 1 or self.k < 1):
            raise ConfigError("C and k must be >= 1")
        if self.retriever_freeze_epochs < 0:
            raise ConfigError("retriever_freeze_epochs must be >= 0")
        if not 0.0 < self.rebuild_every_fraction <= 1.0:
            raise ConfigError("rebuild_every_fraction must be in (0, 1]")
        if self.retriever_noise_sigma < 0:
            raise ConfigError("retriever_noise_sigma must be >= 0")
        if self.encoder_backend not in enc.BACKENDS:
            raise ConfigError(f"unknown encoder_backend {self.encoder_backend!r}")
        if self.retrieval_mode == "learned" and self.encoder_backend != "count_linear":
            raise ConfigError("learned retrieval needs the count_linear backend")
        if self.mechanism == "oracle" and self.retrieval_mode != "optimal":
            raise ConfigError("the oracle mechanism requires optimal retrieval")
        if self.d_model < 1 or self.d_model % self.n_heads:
            raise ConfigError("d_model must be a positive multiple of n_heads")
        if min(self.emb_dim, self.n_layers, self.n_heads) < 1:
            raise ConfigError("emb_dim, n_layers, n_heads must be >= 1")
        return self


@dataclass
class EpochRow:
    epoch: int
    step: int
    loss: float
    dev_acc: float
    rebuilds: int
    seconds: float


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False
    failure_epoch: int = -1
    failure_step: int = -1
    max_clipped_norm: float = 0.0

    @property
    def best_dev_acc(self):
        return self.rows[self.best_epoch].dev_acc if self.rows else float("nan")

    def mark_best(self):
        """Best epoch = argmax dev accuracy, earliest on ties."""
        if self.rows:
            accs = [r.dev_acc for r in self.rows]
            self.best_epoch = int(np.argmax(accs))
        return self.best_epoch


def save_log(log: TrainLog, path):
    """Write the log as CSV; wall times go to a .timing.json sidecar.

    The seconds column is written as 0.0 so that reruns with the same config
    and seed produce byte-identical files.
    """
    path = Path(path)
    lines = ["epoch,step,loss,dev_acc,rebuilds,seconds"]
    for r in log.rows:
        lines.append(f"{r.epoch},{r.step},{r.loss!r},{r.dev_acc!r},{r.rebuilds},0.0")
    path.write_text("\n".join(lines) + "\n")
    sidecar = {"per_epoch_seconds": [r.seconds for r in log.rows],
               "total_seconds": float(sum(r.seconds for r in log.rows))}
    path.with_suffix(".timing.json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n")
    return path


def load_log(path):
    log = TrainLog()
    with open(path) as f:
        header = f.readline().strip().split(",")
        if header != ["epoch", "step", "loss", "dev_acc", "rebuilds", "seconds"]:
            raise ValueError(f"unexpected log header {header}")
        for line in f:
            e, s, lo, da, rb, sec = line.strip().split(",")
            log.rows.append(EpochRow(int(e), int(s), float(lo), float(da),
                                     int(rb), float(sec)))
    log.mark_best()
    return log


# ---------------------------------------------------------------------------
# Batches

@dataclass
class Batch:
    """A batch of points with their retrieved-set context.

    set_tokens[i][j] lists set j's explanation token tuples for point i.  For
    score-based retrieval, set_vectors holds the summed store embeddings of
    each set (constants under the stop-gradient) and q_embs the live query
    embeddings; otherwise qprobs fixes the set distribution directly.
    """
    xs: list
    ys: np.ndarray
    set_tokens: list
    qprobs: np.ndarray = None
    set_vectors: np.ndarray = None
    q_embs: np.ndarray = None
    enc_caches: list = None


def vocab_ceiling(gen_cfg: GenConfig):
    """Largest token value any split or explanation kind can emit."""
    return max(gen_cfg.max_index, gen_cfg.max_value + MAX_EPSILON)


def input_length(gen_cfg: GenConfig, mechanism, C, expl_len):
    """Longest token sequence the classifier will see."""
    if C == 0 or expl_len == 0:
        return gen_cfg.seq_len + 1
    if mechanism == "hmean":
        return gen_cfg.seq_len + 2 + expl_len
    return gen_cfg.seq_len + 1 + C * (expl_len + 1)


def explanation_length(dataset):
    return max((len(p.e.tokens) for p in dataset.points if p.e is not None),
               default=0)


def optimal_k(optimal_index, C, k, own_excluded=True):
    """Clamp k so every query can fill k disjoint same-index sets of C."""
    cand = min(len(v) for v in optimal_index.values()) - (1 if own_excluded else 0)
    if cand < C:
        raise ret.RetrievalError(
            f"optimal retrieval needs {C} same-index explanations, have {cand}")
    return max(1, min(k, cand // C))


def refresh_queries(batch: Batch, enc_params, want_grad=False):
    """Re-embed the queries; retrieved sets and store vectors stay fixed."""
    if want_grad:
        pairs = [enc.embed_with_cache(enc_params, x) for x in batch.xs]
        q_embs = np.stack([p[0] for p in pairs])
        caches = [p[1] for p in pairs]
    else:
        q_embs = enc.embed_sequences(enc_params, batch.xs)
        caches = None
    return replace(batch, q_embs=q_embs, enc_caches=caches)


def assemble_batch(points, *, mode, C, k, store=None, enc_params=None,
                   optimal_index=None, want_grad=False):
    """Retrieve context for a batch of points under the given mode.

    Each point's own explanation is never retrieved.  For store-backed modes
    the ranked top C*k come back chunked into k sets alongside the summed set
    embeddings (stop-gradient constants).
    """
    xs = [p.x for p in points]
    ys = np.array([p.y for p in points], dtype=np.int64)
    if mode == "none":
        batch = Batch(xs, ys, [[[]] for _ in points],
                      qprobs=np.ones((len(points), 1)))
    elif mode == "optimal":
        set_tokens, qprobs = [], []
        for p in points:
            sets = ret.optimal_retrieve(optimal_index, p.index, p.id, C, k)
            set_tokens.append([[e.tokens for e in s.explanations] for s in sets])
            qprobs.append([s.normalized_prob for s in sets])
        batch = Batch(xs, ys, set_tokens, qprobs=np.asarray(qprobs))
    else:
        batch = Batch(xs, ys, [])
        batch = refresh_queries(batch, enc_params, want_grad=want_grad)
        set_tokens = []
        set_vectors = np.zeros((len(points), k, enc_params.out_dim))
        for i, p in enumerate(points):
            entries, _ = ret.topk(store, batch.q_embs[i], C * k,
                                  exclude_owner=p.id)
            sets = [entries[j * C:(j + 1) * C] for j in range(k)]
            set_tokens.append([[e.tokens for e in s] for s in sets])
            for j, s in enumerate(sets):
                rows = [e.explanation_id for e in s]
                set_vectors[i, j] = store.embeddings[rows].sum(axis=0)
        batch.set_tokens = set_tokens
        batch.set_vectors = set_vectors
    return batch


# ---------------------------------------------------------------------------
# Marginal loss

def _cat_sequence(x, expl_tokens):
    out = list(x) + [SEP_TOKEN]
    for toks in expl_tokens:
        out.extend(toks)
        out.append(SEP_TOKEN)
    return out


def _forward(cp: cl.ClassifierParams, batch: Batch, mechanism):
    """Set probabilities q [B,k] and per-set label distributions p [B,k,2]."""
    B = len(batch.xs)
    k = len(batch.set_tokens[0])
    if batch.set_vectors is not None:
        scores = np.einsum("bke,be->bk", batch.set_vectors, batch.q_embs)
        q = nn.softmax(scores)
    else:
        q = np.asarray(batch.qprobs, dtype=float)
    if mechanism == "hmean":
        C = len(batch.set_tokens[0][0])
        seqs = [_cat_sequence(x, [toks])
                for x, sets in zip(batch.xs, batch.set_tokens)
                for s in sets for toks in s]
        rows = np.stack([cp.rows(s) for s in seqs])
        pooled, ecache = nn.encode_pooled(cp.params, cp.cfg, rows)
        mean = pooled.reshape(B * k, C, -1).mean(axis=1)
        logits, hcache = nn.head_forward(cp.params, mean)
        cache = ("hmean", ecache, hcache, C)
    else:
        seqs = [_cat_sequence(x, s)
                for x, sets in zip(batch.xs, batch.set_tokens) for s in sets]
        rows = np.stack([cp.rows(s) for s in seqs])
        pooled, ecache = nn.encode_pooled(cp.params, cp.cfg, rows)
        logits, hcache = nn.head_forward(cp.params, pooled)
        cache = ("textcat", ecache, hcache, 1)
    p = nn.softmax(logits).reshape(B, k, -1)
    return q, p, cache


def _marginals(q, p, ys):
    m = np.take_along_axis(p, ys[:, None, None], axis=2)[:, :, 0]
    return m, (q * m).sum(axis=1)


def loss(cp: cl.ClassifierParams, batch: Batch, mechanism="textcat"):
    """Mean over the batch of -log of the marginal true-label probability."""
    q, p, _ = _forward(cp, batch, mechanism)
    _, M = _marginals(q, p, batch.ys)
    with np.errstate(divide="ignore"):
        value = float(-np.log(M).mean())
    if not math.isfinite(value):
        raise FloatingPointError("non-finite loss")
    return value


def loss_and_grads(cp: cl.ClassifierParams, batch: Batch, mechanism="textcat",
                   enc_params=None):
    """Loss plus gradients for the classifier and, optionally, the encoder.

    Encoder gradients are produced when the batch carries embedding caches;
    they flow through the query embeddings only, with the stored set vectors
    held constant.
    """
    B = len(batch.xs)
    ys = batch.ys
    q, p, cache = _forward(cp, batch, mechanism)
    m, M = _marginals(q, p, ys)
    with np.errstate(divide="ignore"):
        value = float(-np.log(M).mean())
    if not math.isfinite(value):
        raise FloatingPointError("non-finite loss")

    onehot = np.eye(p.shape[-1])[ys]
    coeff = q * m / (M[:, None] * B)
    dlogits = coeff[:, :, None] * (p - onehot[:, None, :])

    grads = nn.zeros_like_params(cp.params)
    kind, ecache, hcache, C = cache
    flat = dlogits.reshape(-1, p.shape[-1])
    dpooled = nn.head_backward(flat, hcache, cp.params, grads)
    if kind == "hmean":
        dpooled = np.repeat(dpooled, C, axis=0) / C
    nn.encode_backward(dpooled, ecache, cp.params, cp.cfg, grads)

    d_proj = None
    if (batch.enc_caches is not None and batch.set_vectors is not None
            and enc_params is not None):
        ds = q * (M[:, None] - m) / (M[:, None] * B)
        d_qemb = np.einsum("bk,bke->be", ds, batch.set_vectors)
        d_proj = np.zeros_like(enc_params.projection)
        for cache_i, dq in zip(batch.enc_caches, d_qemb):
            enc.embed_backward(cache_i, dq, d_proj)
    return value, grads, d_proj


def marginal_probs(cp: cl.ClassifierParams, batch: Batch, mechanism="textcat"):
    q, p, _ = _forward(cp, batch, mechanism)
    out = np.einsum("bk,bkc->bc", q, p)
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite prediction")
    return out


# ---------------------------------------------------------------------------
# Evaluation

def evaluate_oracle(points, optimal_index, C):
    """Accuracy of the analytic pipeline: optimal retrieval + interpretation."""
    correct = 0
    for p in points:
        sets = ret.optimal_retrieve(optimal_index, p.index, p.id, C, 1)
        try:
            yhat = cl.oracle_interpret(p.x, [e.tokens for e in sets[0].explanations])
        except (cl.NoRelevantExplanation, cl.IncompleteEvidence):
            yhat = 0
        correct += int(yhat == p.y)
    return correct / len(points)


def evaluate(cp, points, *, mechanism="textcat", mode="learned", C=4, k=4,
             store=None, enc_params=None, optimal_index=None,
             chunk_sequences=512):
    """Accuracy of argmax marginal prediction over a list of points."""
    if mechanism == "oracle":
        return evaluate_oracle(points, optimal_index, C)
    per_point = 1 if mode == "none" else (k * C if mechanism == "hmean" else k)
    step = max(1, chunk_sequences // max(1, per_point))
    correct = 0
    for i in range(0, len(points), step):
        part = points[i:i + step]
        batch = assemble_batch(part, mode=mode, C=C, k=k, store=store,
                               enc_params=enc_params,
                               optimal_index=optimal_index)
        probs = marginal_probs(cp, batch, mechanism)
        correct += int((probs.argmax(axis=1) == batch.ys).sum())
    return correct / len(points)


# ---------------------------------------------------------------------------
# Controls

def degrade_retriever(params, sigma, rng):
    """Fresh encoder with N(0, sigma^2) noise added to every parameter."""
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return params
    noise = rng.normal(0.0, sigma, params.projection.shape)
    return replace(params, projection=params.projection + noise)


@dataclass
class TrainResult:
    classifier: cl.ClassifierParams
    encoder: object
    store: object
    optimal_index: object
    log: TrainLog
    gen_config: GenConfig
    train_config: TrainConfig
    k_effective: int


def _snapshot(cp, enc_params):
    params = {name: v.copy() for name, v in cp.params.items()}
    proj = enc_params.projection.copy() if enc_params is not None else None
    return params, proj


def train(gen_cfg: GenConfig, tcfg: TrainConfig, datasets=None, log_path=None):
    """Optimize on the train split, tracking dev accuracy per epoch.

    Returns the best-dev checkpoint.  The retrieval encoder stays frozen for
    the first retriever_freeze_epochs; while learned and unfrozen, the store
    is re-encoded every rebuild_every_fraction of an epoch and at each epoch
    end before dev evaluation.  Divergence (non-finite loss) stops training
    and is reported on the log rather than raised.
    """
    gen_cfg.validate()
    tcfg.validate()
    if datasets is None:
        datasets = generate_dataset(gen_cfg)
    train_ds, dev_ds = datasets["train"], datasets["dev"]
    mode, mech = tcfg.retrieval_mode, tcfg.mechanism
    log = TrainLog()

    expl_len = 0 if mode == "none" else explanation_length(train_ds)
    C = 0 if mode == "none" else tcfg.C
    cp = cl.init_classifier(
        vocab_ceiling(gen_cfg), input_length(gen_cfg, mech, C, expl_len),
        d_model=tcfg.d_model, n_layers=tcfg.n_layers, n_heads=tcfg.n_heads,
        head_hidden=tcfg.head_hidden, seed=tcfg.seed)

    enc_params, store, optimal_index = None, None, None
    k_eff = 1 if mode == "none" else tcfg.k
    if mode in ("fixed", "learned"):
        enc_params = enc.init_encoder(tcfg.encoder_backend, vocab_ceiling(gen_cfg),
                                      emb_dim=tcfg.emb_dim, seed=tcfg.seed)
        if tcfg.retriever_noise_sigma > 0:
            enc_params = degrade_retriever(enc_params, tcfg.retriever_noise_sigma,
                                           _stream(tcfg.seed, _NOISE_STREAM))
        store = ret.build_store(train_ds, enc_params)
    elif mode == "optimal":
        optimal_index = ret.build_optimal_index(train_ds)
        k_eff = optimal_k(optimal_index, tcfg.C, tcfg.k)

    if mech == "oracle":
        t0 = time.perf_counter()
        dev_acc = evaluate_oracle(dev_ds.points, optimal_index, tcfg.C)
        log.rows.append(EpochRow(0, 0, float("nan"), dev_acc, 0,
                                 time.perf_counter() - t0))
        log.mark_best()
        if log_path:
            save_log(log, log_path)
        return TrainResult(cp, None, None, optimal_index, log, gen_cfg, tcfg, 1)

    points = train_ds.points
    n = len(points)
    steps_per_epoch = -(-n // tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    rebuild_interval = max(1, round(tcfg.rebuild_every_fraction * steps_per_epoch))
    trainable = mode == "learned" and enc_params is not None and enc_params.trainable
    opt_cls = nn.AdamW(cp.params, lr=tcfg.learning_rate,
                       weight_decay=tcfg.weight_decay)
    opt_enc = None
    rebuilds = 0
    global_step = 0
    best = None
    best_acc = -1.0

    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        live = trainable and epoch >= tcfg.retriever_freeze_epochs
        order = _stream(tcfg.seed, _SHUFFLE_STREAM, epoch).permutation(n)
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            part = [points[i] for i in order[s * tcfg.batch_size:
                                             (s + 1) * tcfg.batch_size]]
            batch = assemble_batch(part, mode=mode, C=tcfg.C, k=k_eff,
                                   store=store, enc_params=enc_params,
                                   optimal_index=optimal_index, want_grad=live)
            try:
                value, grads, d_proj = loss_and_grads(cp, batch, mech,
                                                      enc_params=enc_params)
            except FloatingPointError:
                log.diverged = True
                log.failure_epoch, log.failure_step = epoch, global_step
                break
            epoch_loss += value * len(part)
            dicts = [grads] + ([{"projection": d_proj}] if d_proj is not None else [])
            norm = nn.clip_global_norm(dicts, tcfg.grad_clip_norm)
            log.max_clipped_norm = max(log.max_clipped_norm,
                                       min(norm, tcfg.grad_clip_norm))
            lr = nn.lr_at(global_step, total_steps, tcfg.learning_rate,
                          tcfg.warmup_fraction)
            opt_cls.step(cp.params, grads, lr=lr)
            if d_proj is not None:
                if opt_enc is None:
                    opt_enc = nn.AdamW({"projection": enc_params.projection},
                                       lr=tcfg.learning_rate,
                                       weight_decay=tcfg.weight_decay)
                opt_enc.step({"projection": enc_params.projection},
                             {"projection": d_proj}, lr=lr)
            global_step += 1
            if live and (s + 1) % rebuild_interval == 0 and s + 1 < steps_per_epoch:
                ret.rebuild(store, enc_params)
                rebuilds += 1
        if log.diverged:
            break
        if live:
            ret.rebuild(store, enc_params)
            rebuilds += 1
        dev_acc = evaluate(cp, dev_ds.points, mechanism=mech, mode=mode,
                           C=tcfg.C, k=k_eff, store=store,
                           enc_params=enc_params, optimal_index=optimal_index)
        log.rows.append(EpochRow(epoch, global_step, epoch_loss / n, dev_acc,
                                 rebuilds, time.perf_counter() - t0))
        if dev_acc > best_acc:
            best_acc = dev_acc
            best = _snapshot(cp, enc_params)

    if best is not None:
        cp.params, proj = best[0], best[1]
        if proj is not None:
            enc_params.projection = proj
        if store is not None and trainable:
            ret.rebuild(store, enc_params)
    log.mark_best()
    if log_path:
        save_log(log, log_path)
    return TrainResult(cp, enc_params, store, optimal_index, log, gen_cfg,
                       tcfg, k_eff)


def train_with_restarts(gen_cfg, tcfg, max_restarts=0, datasets=None,
                        log_path=None):
    """Rerun-on-divergence policy: bump the seed and retry."""
    attempts = 0
    while True:
        result = train(gen_cfg, tcfg, datasets=datasets, log_path=log_path)
        if not result.log.diverged or attempts >= max_restarts:
            return result, attempts
        attempts += 1
        tcfg = replace(tcfg, seed=tcfg.seed + 1)


def evaluate_result(result: TrainResult, points, k=None, chunk_sequences=512):
    """Evaluate a finished run on any point list, optionally at a new k."""
    tcfg = result.train_config
    mode = tcfg.retrieval_mode
    if k is None:
        k = result.k_effective
    elif mode == "optimal":
        k = optimal_k(result.optimal_index, tcfg.C, k)
    return evaluate(result.classifier, points, mechanism=tcfg.mechanism,
                    mode=mode, C=tcfg.C, k=k, store=result.store,
                    enc_params=result.encoder,
                    optimal_index=result.optimal_index,
                    chunk_sequences=chunk_sequences)


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(result: TrainResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cl.save_classifier(result.classifier, out / "classifier.npz")
    if result.encoder is not None:
        enc.save_encoder(result.encoder, out / "encoder.npz")
    save_log(result.log, out / "train_log.csv")
    meta = {
        "gen_config": asdict(result.gen_config),
        "train_config": asdict(result.train_config),
        "k_effective": result.k_effective,
        "best_epoch": result.log.best_epoch,
        "best_dev_acc": result.log.best_dev_acc,
        "diverged": result.log.diverged,
        "failure_epoch": result.log.failure_epoch,
        "failure_step": result.log.failure_step,
    }
    (out / "result.json").write_text(json.dumps(meta, sort_keys=True, indent=2)
                                     + "\n")
    return out


def load_checkpoint(out_dir):
    """Checkpoint dir -> (classifier, encoder or None, meta dict)."""
    out = Path(out_dir)
    meta = json.loads((out / "result.json").read_text())
    cp = cl.load_classifier(out / "classifier.npz")
    enc_params = None
    if (out / "encoder.npz").exists():
        enc_params = enc.load_encoder(out / "encoder.npz")
    return cp, enc_params, meta
