"""Small transformer encoder with hand-written backpropagation.

Everything runs in float64 numpy: token + learned positional embeddings,
pre-norm blocks of multi-head self-attention and a GELU feed-forward, a final
layer norm, mean pooling over positions, and a 1-hidden-layer MLP head that
emits two logits.  An AdamW optimizer, global-norm gradient clipping, and a
linear warmup/decay schedule live here too.

Layer functions return (output, cache); the matching backward consumes the
cache and accumulates parameter gradients into a dict keyed like the params.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_rows: int
    max_len: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 0
    head_hidden: int = 0
    n_classes: int = 2

    @property
    def ff_dim(self):
        return self.d_ff or 4 * self.d_model

    @property
    def head_dim(self):
        return self.head_hidden or self.d_model


def init_params(cfg: ModelConfig, rng):
    """Scaled-normal init; residual output projections shrunk by depth."""
    d, ff, hh = cfg.d_model, cfg.ff_dim, cfg.head_dim
    w = d ** -0.5
    shrink = 1.0 / np.sqrt(2.0 * cfg.n_layers)  # residual branches
    p = {
        "tok_emb": 0.02 * rng.standard_normal((cfg.vocab_rows, d)),
        "pos_emb": 0.02 * rng.standard_normal((cfg.max_len, d)),
        "ln_f.g": np.ones(d), "ln_f.b": np.zeros(d),
        "head.w1": w * rng.standard_normal((d, hh)),
        "head.b1": np.zeros(hh),
        "head.w2": hh ** -0.5 * rng.standard_normal((hh, cfg.n_classes)),
        "head.b2": np.zeros(cfg.n_classes),
    }
    for i in range(cfg.n_layers):
        p[f"l{i}.ln1.g"] = np.ones(d)
        p[f"l{i}.ln1.b"] = np.zeros(d)
        p[f"l{i}.attn.wqkv"] = w * rng.standard_normal((d, 3 * d))
        p[f"l{i}.attn.bqkv"] = np.zeros(3 * d)
        p[f"l{i}.attn.wo"] = w * shrink * rng.standard_normal((d, d))
        p[f"l{i}.attn.bo"] = np.zeros(d)
        p[f"l{i}.ln2.g"] = np.ones(d)
        p[f"l{i}.ln2.b"] = np.zeros(d)
        p[f"l{i}.ffn.w1"] = w * rng.standard_normal((d, ff))
        p[f"l{i}.ffn.b1"] = np.zeros(ff)
        p[f"l{i}.ffn.w2"] = ff ** -0.5 * shrink * rng.standard_normal((ff, d))
        p[f"l{i}.ffn.b2"] = np.zeros(d)
    return p


def zeros_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# Primitives

def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=axes), dy.sum(axis=axes)


def _split_heads(x, n_heads):
    B, T, d = x.shape
    return x.reshape(B, T, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def attention_forward(x, params, prefix, n_heads):
    wqkv, bqkv = params[f"{prefix}.wqkv"], params[f"{prefix}.bqkv"]
    wo, bo = params[f"{prefix}.wo"], params[f"{prefix}.bo"]
    d = x.shape[-1]
    qkv = x @ wqkv + bqkv
    q, k, v = (_split_heads(t, n_heads) for t in np.split(qkv, 3, axis=-1))
    scale = (d // n_heads) ** -0.5
    att = softmax(np.einsum("bhtd,bhsd->bhts", q, k) * scale)
    ctx = _merge_heads(np.einsum("bhts,bhsd->bhtd", att, v))
    out = ctx @ wo + bo
    return out, (x, q, k, v, att, ctx, scale)


def attention_backward(dout, cache, params, prefix, n_heads, grads):
    x, q, k, v, att, ctx, scale = cache
    wqkv, wo = params[f"{prefix}.wqkv"], params[f"{prefix}.wo"]

    grads[f"{prefix}.wo"] += np.einsum("btd,bte->de", ctx, dout)
    grads[f"{prefix}.bo"] += dout.sum(axis=(0, 1))
    dctx = _split_heads(dout @ wo.T, n_heads)

    datt = np.einsum("bhtd,bhsd->bhts", dctx, v)
    dv = np.einsum("bhts,bhtd->bhsd", att, dctx)
    dscores = (datt - (datt * att).sum(axis=-1, keepdims=True)) * att * scale
    dq = np.einsum("bhts,bhsd->bhtd", dscores, k)
    dk = np.einsum("bhts,bhtd->bhsd", dscores, q)

    dqkv = np.concatenate([_merge_heads(t) for t in (dq, dk, dv)], axis=-1)
    grads[f"{prefix}.wqkv"] += np.einsum("btd,bte->de", x, dqkv)
    grads[f"{prefix}.bqkv"] += dqkv.sum(axis=(0, 1))
    return dqkv @ wqkv.T


def ffn_forward(x, params, prefix):
    w1, b1 = params[f"{prefix}.w1"], params[f"{prefix}.b1"]
    w2, b2 = params[f"{prefix}.w2"], params[f"{prefix}.b2"]
    pre = x @ w1 + b1
    act = gelu(pre)
    return act @ w2 + b2, (x, pre, act)


def ffn_backward(dout, cache, params, prefix, grads):
    x, pre, act = cache
    w1, w2 = params[f"{prefix}.w1"], params[f"{prefix}.w2"]
    grads[f"{prefix}.w2"] += np.einsum("btf,btd->fd", act, dout)
    grads[f"{prefix}.b2"] += dout.sum(axis=(0, 1))
    dact = dout @ w2.T
    dpre = dact * gelu_grad(pre)
    grads[f"{prefix}.w1"] += np.einsum("btd,btf->df", x, dpre)
    grads[f"{prefix}.b1"] += dpre.sum(axis=(0, 1))
    return dpre @ w1.T


# ---------------------------------------------------------------------------
# Full encoder

def encode_pooled(params, cfg: ModelConfig, rows):
    """Token rows [B, T] -> mean-pooled representation [B, d_model]."""
    rows = np.asarray(rows)
    B, T = rows.shape
    if T > cfg.max_len:
        raise ValueError(f"sequence length {T} exceeds max_len {cfg.max_len}")
    x = params["tok_emb"][rows] + params["pos_emb"][:T]
    caches = []
    for i in range(cfg.n_layers):
        h1, ln1 = layer_norm_forward(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        a, attc = attention_forward(h1, params, f"l{i}.attn", cfg.n_heads)
        x = x + a
        h2, ln2 = layer_norm_forward(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        f, ffnc = ffn_forward(h2, params, f"l{i}.ffn")
        x = x + f
        caches.append((ln1, attc, ln2, ffnc))
    xf, lnf = layer_norm_forward(x, params["ln_f.g"], params["ln_f.b"])
    pooled = xf.mean(axis=1)
    return pooled, (rows, T, caches, lnf)


def encode_backward(dpooled, cache, params, cfg: ModelConfig, grads):
    rows, T, caches, lnf = cache
    B = rows.shape[0]
    dxf = np.repeat(dpooled[:, None, :] / T, T, axis=1)
    dx, dg, db = layer_norm_backward(dxf, lnf)
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db
    for i in reversed(range(cfg.n_layers)):
        ln1, attc, ln2, ffnc = caches[i]
        dh2 = ffn_backward(dx, ffnc, params, f"l{i}.ffn", grads)
        dx2, dg, db = layer_norm_backward(dh2, ln2)
        grads[f"l{i}.ln2.g"] += dg
        grads[f"l{i}.ln2.b"] += db
        dx = dx + dx2
        dh1 = attention_backward(dx, attc, params, f"l{i}.attn", cfg.n_heads,
                                 grads)
        dx1, dg, db = layer_norm_backward(dh1, ln1)
        grads[f"l{i}.ln1.g"] += dg
        grads[f"l{i}.ln1.b"] += db
        dx = dx + dx1
    np.add.at(grads["tok_emb"], rows.ravel(), dx.reshape(-1, cfg.d_model))
    grads["pos_emb"][:T] += dx.sum(axis=0)


def head_forward(params, pooled):
    pre = pooled @ params["head.w1"] + params["head.b1"]
    act = gelu(pre)
    logits = act @ params["head.w2"] + params["head.b2"]
    return logits, (pooled, pre, act)


def head_backward(dlogits, cache, params, grads):
    pooled, pre, act = cache
    grads["head.w2"] += act.T @ dlogits
    grads["head.b2"] += dlogits.sum(axis=0)
    dact = dlogits @ params["head.w2"].T
    dpre = dact * gelu_grad(pre)
    grads["head.w1"] += pooled.T @ dpre
    grads["head.b1"] += dpre.sum(axis=0)
    return dpre @ params["head.w1"].T


# ---------------------------------------------------------------------------
# Optimization

def lr_at(step, total_steps, base_lr, warmup_fraction=0.1):
    """Linear warmup to base_lr, then linear decay to zero."""
    warm = max(1, int(round(warmup_fraction * total_steps)))
    if step < warm:
        return base_lr * (step + 1) / warm
    if total_steps <= warm:
        return base_lr
    return base_lr * max(0.0, (total_steps - step) / (total_steps - warm))


def _decayed(name, value):
    return value.ndim >= 2 and "ln" not in name


class AdamW:
    """Decoupled weight decay; decay skips layer norms and biases."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)

    def step(self, params, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay and _decayed(k, p):
                update = update + self.weight_decay * p
            p -= lr * update


def global_grad_norm(grad_dicts):
    total = 0.0
    for grads in grad_dicts:
        for g in grads.values():
            total += float((g * g).sum())
    return np.sqrt(total)


def clip_global_norm(grad_dicts, max_norm):
    """Scale all gradients in place so the global norm is at most max_norm."""
    norm = global_grad_norm(grad_dicts)
    if norm > max_norm:
        scale = max_norm / norm
        for grads in grad_dicts:
            for g in grads.values():
                g *= scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoints

def save_params(path, params, meta):
    import json
    arrays = dict(params)
    arrays["_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_params(path):
    import json
    blob = np.load(path if str(path).endswith(".npz") else str(path) + ".npz")
    meta = json.loads(bytes(blob["_meta"]).decode())
    params = {k: blob[k] for k in blob.files if k != "_meta"}
    return params, meta
