"""Synthetic counting-task generator.

Each data point is a sequence of integers whose label says whether one member
of a causal integer pair occurs more often than the other.  The first token is
an index naming the task, the second an indicator choosing which of the task's
two pairs (m,n) or (r,d) is causal, and the remaining slots hold occurrences of
the four task integers plus random fillers.  Every point also carries an
explanation of its task in one of four forms: the full tuple, a noisy tuple,
complementary partial tuples, or the causal pair alone.

Generation is deterministic given (config, seed): every index draws its own
RNG stream, so per-index work is order-independent and the output ordering is
canonical (ascending index, then point ordinal).
"""

import json
from dataclasses import dataclass, field, asdict
from functools import lru_cache

import numpy as np

# Token id 0 is reserved as the separator used by downstream models; sequences
# never contain it.  Evidential noise can push explanation slots below 1 (even
# below 0), so the usable token range extends down to TOKEN_FLOOR.
SEP_TOKEN = 0
TOKEN_FLOOR = -8
MAX_EPSILON = 8

EXPLANATION_KINDS = ("full_info", "evidential", "recomposable", "causal_only")
SPLITS = ("train", "dev", "test")

_SPLIT_CODE = {"train": 0, "dev": 1, "test": 2}
_SPEC_STREAM = 3


class ConfigError(ValueError):
    """Raised when a generation config violates its invariants."""


class GenerationError(RuntimeError):
    """Raised when no sequence can satisfy the requested count constraints."""


def _stream(seed, *key):
    """Independent RNG stream keyed on (seed, *key)."""
    return np.random.default_rng([int(seed)] + [int(k) for k in key])


@dataclass(frozen=True)
class GenConfig:
    sample_size: int = 5000
    num_tasks: int = 500
    seq_len: int = 20
    max_value: int = 100
    max_index: int = 10000
    dev_multiplier: float = 2.0
    test_multiplier: float = 10.0
    explanation_kind: str = "full_info"
    epsilon: int = 2
    pieces: int = 2
    strong_weak_correlation: float = 0.0
    include_index: bool = True
    smooth_relevance: bool = False
    lex_tuples: bool = False
    causal_always_mn: bool = False
    seed: int = 0

    @property
    def n_task(self):
        return self.sample_size // self.num_tasks

    def validate(self):
        if self.num_tasks < 1 or self.sample_size < self.num_tasks:
            raise ConfigError("need sample_size >= num_tasks >= 1")
        if self.num_tasks > self.max_index:
            raise ConfigError(
                f"num_tasks={self.num_tasks} exceeds max_index={self.max_index}: "
                "not enough distinct index values")
        if self.seq_len < 6:
            raise ConfigError("seq_len must be at least 6")
        if self.max_value < 4:
            raise ConfigError("max_value must admit 4 distinct task integers")
        if self.explanation_kind not in EXPLANATION_KINDS:
            raise ConfigError(f"unknown explanation_kind {self.explanation_kind!r}")
        if self.epsilon < 0 or self.epsilon > MAX_EPSILON:
            raise ConfigError(f"epsilon must be in [0, {MAX_EPSILON}]")
        if self.pieces not in (2, 4):
            raise ConfigError("pieces must be 2 or 4")
        if not 0.0 <= self.strong_weak_correlation <= 1.0:
            raise ConfigError("strong_weak_correlation must be in [0, 1]")
        if self.dev_multiplier <= 0 or self.test_multiplier <= 0:
            raise ConfigError("split multipliers must be positive")
        if self.smooth_relevance and not self.causal_always_mn:
            raise ConfigError("smooth_relevance requires causal_always_mn")
        return self


@dataclass(frozen=True)
class TaskSpec:
    index: int
    m: int
    n: int
    r: int
    d: int

    @property
    def tuple(self):
        return (self.m, self.n, self.r, self.d)


@dataclass
class Explanation:
    kind: str
    tokens: tuple
    owner_id: int = -1


@dataclass
class DataPoint:
    id: int
    x: tuple
    y: int
    e: Explanation
    index: int
    indicator: int
    agree: bool
    numerous: bool
    causal: str  # "mn" | "rd"


@dataclass
class Dataset:
    split: str
    points: list
    config: GenConfig

    def __len__(self):
        return len(self.points)

    def sequences(self):
        return {p.x for p in self.points}


def sample_task_specs(cfg: GenConfig, rng=None):
    """Draw num_tasks specs: distinct indices, pairwise-distinct-member tuples."""
    cfg.validate()
    if rng is None:
        rng = _stream(cfg.seed, _SPEC_STREAM)
    if cfg.smooth_relevance or cfg.lex_tuples:
        return build_smooth_map(cfg, rng)
    indices = rng.choice(np.arange(1, cfg.max_index + 1), size=cfg.num_tasks,
                         replace=False)
    specs, seen = [], set()
    for index in indices:
        while True:
            tup = tuple(rng.choice(np.arange(1, cfg.max_value + 1), size=4,
                                   replace=False))
            if tup not in seen:
                seen.add(tup)
                break
        specs.append(TaskSpec(int(index), *[int(v) for v in tup]))
    return specs


def _lex_pairs(count, max_value):
    """First `count` (m,n) pairs with m != n in increasing lexicographic order."""
    pairs = []
    for m in range(1, max_value + 1):
        for n in range(1, max_value + 1):
            if n == m:
                continue
            pairs.append((m, n))
            if len(pairs) == count:
                return pairs
    raise ConfigError(f"cannot draw {count} distinct (m,n) pairs from "
                      f"max_value={max_value}")


def build_smooth_map(cfg: GenConfig, rng=None):
    """Rank-match sorted indices to lexicographically increasing (m,n) pairs.

    Nearby indices get nearby pairs, so the index-to-task map is smooth.  With
    lex_tuples set but smooth_relevance unset, the same pair multiset is kept
    but the matching is randomly permuted (the non-smooth control).
    """
    if rng is None:
        rng = _stream(cfg.seed, _SPEC_STREAM)
    indices = np.sort(rng.choice(np.arange(1, cfg.max_index + 1),
                                 size=cfg.num_tasks, replace=False))
    pairs = _lex_pairs(cfg.num_tasks, cfg.max_value)
    if not cfg.smooth_relevance:
        pairs = [pairs[j] for j in rng.permutation(cfg.num_tasks)]
    specs = []
    for index, (m, n) in zip(indices, pairs):
        # r,d never drive the label here (causal pair is always (m,n)) but are
        # drawn anyway so every explanation keeps the full 5-slot format.
        pool = np.setdiff1d(np.arange(1, cfg.max_value + 1), [m, n])
        r, d = rng.choice(pool, size=2, replace=False)
        specs.append(TaskSpec(int(index), int(m), int(n), int(r), int(d)))
    return specs


@lru_cache(maxsize=4096)
def _count_table(content_slots, b1, b2, b3, b4, y, agree, numerous):
    """All count vectors (t_c1,t_c2,t_w1,t_w2) satisfying the constraints.

    Counts are totals over the whole sequence; b* are contributions already
    made by the index/indicator slots.  Constraints: the causal pair's order
    encodes y, the non-causal pair's order matches it iff agree, the pair
    flagged numerous has the strictly larger total, every integer occurs at
    least once, and the content slots can hold the remainder.
    """
    caps = [content_slots + b for b in (b1, b2, b3, b4)]
    grids = np.mgrid[1:caps[0] + 1, 1:caps[1] + 1, 1:caps[2] + 1, 1:caps[3] + 1]
    t1, t2, t3, t4 = [g.ravel() for g in grids]
    ok = (t1 >= b1) & (t2 >= b2) & (t3 >= b3) & (t4 >= b4)
    ok &= (t1 - b1) + (t2 - b2) + (t3 - b3) + (t4 - b4) <= content_slots
    ok &= (t1 > t2) if y == 1 else (t1 < t2)
    causal_up = t1 > t2
    weak_up = causal_up if agree else ~causal_up
    ok &= np.where(weak_up, t3 > t4, t3 < t4)
    ok &= (t1 + t2 > t3 + t4) if numerous else (t1 + t2 < t3 + t4)
    return np.stack([t1[ok], t2[ok], t3[ok], t4[ok]], axis=1)


def _draw_fillers(pool, count, rng):
    if count == 0:
        return []
    if len(pool) == 0:
        raise GenerationError("no filler values available outside the task integers")
    return [int(v) for v in pool[rng.integers(0, len(pool), size=count)]]


def assemble_sequence(spec, indicator, agree_flag, numerous_flag, target_y,
                      cfg, rng, filler_pool=None):
    """Build one sequence realizing the requested label and flags.

    Returns (tokens, y) with y recomputed from the final counts; tokens[0] is
    the index (or a filler when include_index is off) and tokens[1] the
    indicator.  numerous_flag=True makes the causal pair the more numerous.
    """
    if indicator not in (1, 2):
        raise ConfigError("indicator must be 1 or 2")
    if filler_pool is None:
        filler_pool = np.setdiff1d(np.arange(1, cfg.max_value + 1),
                                   list(spec.tuple))
    causal_mn = cfg.causal_always_mn or indicator == 1
    if causal_mn:
        c1, c2, w1, w2 = spec.m, spec.n, spec.r, spec.d
    else:
        c1, c2, w1, w2 = spec.r, spec.d, spec.m, spec.n

    slot0 = spec.index if cfg.include_index else _draw_fillers(filler_pool, 1, rng)[0]
    content = cfg.seq_len - 2
    base = [0, 0, 0, 0]
    for v in ((slot0, indicator) if cfg.include_index else (indicator,)):
        for i, t in enumerate((c1, c2, w1, w2)):
            if v == t:
                base[i] += 1
    table = _count_table(content, *base, int(target_y), bool(agree_flag),
                         bool(numerous_flag))
    if len(table) == 0:
        raise GenerationError(
            f"seq_len={cfg.seq_len} cannot satisfy the count constraints")
    t = table[rng.integers(0, len(table))]
    alloc = [int(t[i] - base[i]) for i in range(4)]

    slots = [0] * content
    order = rng.permutation(content)
    pos = 0
    for value, a in zip((c1, c2, w1, w2), alloc):
        for j in order[pos:pos + a]:
            slots[j] = value
        pos += a
    fillers = _draw_fillers(filler_pool, content - pos, rng)
    for j, v in zip(order[pos:], fillers):
        slots[j] = v

    tokens = tuple([slot0, indicator] + slots)
    y = label_of(tokens, spec, indicator, causal_always_mn=cfg.causal_always_mn)
    if y != target_y:
        raise GenerationError("assembled counts do not realize the target label")
    return tokens, y


def label_of(tokens, spec, indicator, causal_always_mn=False):
    """Recompute the label from raw counts; count ties map to 0."""
    if causal_always_mn or indicator == 1:
        a, b = spec.m, spec.n
    else:
        a, b = spec.r, spec.d
    seq = list(tokens)
    return int(seq.count(a) > seq.count(b))


def make_explanations(spec, kind, count, rng, epsilon=2, pieces=2,
                      indicators=None):
    """Build `count` explanations of the given kind for one task.

    Recomposable pieces are alternated so each piece pattern occurs at least
    once; causal_only needs the per-point indicators to pick each pair.
    """
    base = (spec.index, spec.m, spec.n, spec.r, spec.d)
    if kind == "full_info":
        return [Explanation(kind, base) for _ in range(count)]
    if kind == "evidential":
        noise = rng.integers(-epsilon, epsilon + 1, size=(count, 4))
        return [Explanation(kind, (spec.index,) + tuple(int(b + z) for b, z in
                                                        zip(base[1:], row)))
                for row in noise]
    if kind == "recomposable":
        if pieces > count:
            raise GenerationError(
                f"cannot place {pieces} pieces on {count} points")
        out = []
        for t in range(count):
            piece = t % pieces
            if pieces == 2:
                keep = {1, 3} if piece == 0 else {2, 4}
            else:
                keep = {piece + 1}
            tokens = tuple(base[s] if s == 0 or s in keep else 0
                           for s in range(5))
            out.append(Explanation(kind, tokens))
        return out
    if kind == "causal_only":
        if indicators is None:
            raise ConfigError("causal_only explanations need per-point indicators")
        out = []
        for ind in indicators:
            pair = (spec.m, spec.n) if ind == 1 else (spec.r, spec.d)
            out.append(Explanation(kind, (spec.index,) + pair))
        return out
    raise ConfigError(f"unknown explanation kind {kind!r}")


def _balanced_flags(n, n_true, rng):
    flags = np.zeros(n, dtype=bool)
    flags[:n_true] = True
    rng.shuffle(flags)
    return flags


def generate_split(cfg: GenConfig, specs, split, exclude=None, id_start=0,
                   retry_budget=1000):
    """Generate one split: per index, balanced flag vectors drive assembly.

    Per-index points are balanced in indicator, label, and numerosity; the
    agree fraction is 0.5 + 0.5 * strong_weak_correlation.  Sequences present
    in `exclude` are rejected and resampled.
    """
    cfg.validate()
    if split not in _SPLIT_CODE:
        raise ConfigError(f"unknown split {split!r}")
    if split == "train":
        n_per = cfg.n_task
    else:
        mult = cfg.dev_multiplier if split == "dev" else cfg.test_multiplier
        n_per = max(1, round(cfg.n_task * mult))
    agree_frac = 0.5 + 0.5 * cfg.strong_weak_correlation

    points = []
    next_id = id_start
    for spec in sorted(specs, key=lambda s: s.index):
        rng = _stream(cfg.seed, _SPLIT_CODE[split], spec.index)
        if cfg.causal_always_mn:
            indicators = np.ones(n_per, dtype=int)
        else:
            indicators = np.where(_balanced_flags(n_per, n_per - n_per // 2, rng),
                                  1, 2)
        labels = _balanced_flags(n_per, n_per // 2, rng).astype(int)
        agrees = _balanced_flags(n_per, round(agree_frac * n_per), rng)
        numerous = _balanced_flags(n_per, n_per // 2, rng)
        expls = make_explanations(spec, cfg.explanation_kind, n_per, rng,
                                  epsilon=cfg.epsilon, pieces=cfg.pieces,
                                  indicators=[int(v) for v in indicators])
        filler_pool = np.setdiff1d(np.arange(1, cfg.max_value + 1),
                                   list(spec.tuple))
        for t in range(n_per):
            for attempt in range(retry_budget):
                tokens, y = assemble_sequence(
                    spec, int(indicators[t]), bool(agrees[t]),
                    bool(numerous[t]), int(labels[t]), cfg, rng,
                    filler_pool=filler_pool)
                if not exclude or tokens not in exclude:
                    break
            else:
                raise GenerationError(
                    f"index {spec.index}: could not avoid excluded sequences "
                    f"in {retry_budget} attempts")
            expl = expls[t]
            expl.owner_id = next_id
            points.append(DataPoint(
                id=next_id, x=tokens, y=y, e=expl, index=spec.index,
                indicator=int(indicators[t]), agree=bool(agrees[t]),
                numerous=bool(numerous[t]),
                causal="mn" if (cfg.causal_always_mn or indicators[t] == 1)
                else "rd"))
            next_id += 1
    return Dataset(split=split, points=points, config=cfg)


def generate_dataset(cfg: GenConfig, specs=None):
    """Generate all three splits; dev/test sequences never duplicate train."""
    if specs is None:
        specs = sample_task_specs(cfg)
    train = generate_split(cfg, specs, "train", id_start=0)
    exclude = train.sequences()
    dev = generate_split(cfg, specs, "dev", exclude=exclude,
                         id_start=len(train))
    test = generate_split(cfg, specs, "test", exclude=exclude,
                          id_start=len(train) + len(dev))
    return {"train": train, "dev": dev, "test": test, "specs": specs}


# ---------------------------------------------------------------------------
# Serialization

def point_to_record(p: DataPoint):
    return {"id": p.id, "x": list(p.x), "y": p.y, "e": list(p.e.tokens),
            "e_kind": p.e.kind, "index": p.index, "indicator": p.indicator,
            "agree": p.agree, "causal": p.causal}


def save_split(ds: Dataset, path):
    with open(path, "w") as f:
        for p in ds.points:
            f.write(json.dumps(point_to_record(p), separators=(",", ":")))
            f.write("\n")


def load_split(path, cfg: GenConfig, split):
    points = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            e = Explanation(rec["e_kind"], tuple(rec["e"]), rec["id"])
            points.append(DataPoint(
                id=rec["id"], x=tuple(rec["x"]), y=rec["y"], e=e,
                index=rec["index"], indicator=rec["indicator"],
                agree=rec["agree"], numerous=None, causal=rec["causal"]))
    return Dataset(split=split, points=points, config=cfg)


def save_meta(cfg: GenConfig, specs, path):
    meta = {"config": asdict(cfg),
            "specs": [[s.index, s.m, s.n, s.r, s.d] for s in specs]}
    with open(path, "w") as f:
        json.dump(meta, f, separators=(",", ":"))
        f.write("\n")


def load_meta(path):
    with open(path) as f:
        meta = json.load(f)
    cfg = GenConfig(**meta["config"])
    specs = [TaskSpec(*row) for row in meta["specs"]]
    return cfg, specs


def split_stats(ds: Dataset):
    n = len(ds.points)
    per_index = {}
    for p in ds.points:
        per_index[p.index] = per_index.get(p.index, 0) + 1
    return {
        "points": n,
        "label_balance": sum(p.y for p in ds.points) / n if n else 0.0,
        "agree_fraction": sum(p.agree for p in ds.points) / n if n else 0.0,
        "indices": len(per_index),
        "points_per_index": per_index,
    }


# ---------------------------------------------------------------------------
# Validation

def validate_datasets(datasets, cfg: GenConfig, specs):
    """Run every generator invariant; returns a list of (check, ok, detail)."""
    by_index = {s.index: s for s in specs}
    checks = []

    bad = []
    for split in SPLITS:
        for p in datasets[split].points:
            spec = by_index.get(p.index)
            if spec is None or label_of(p.x, spec, p.indicator,
                                        cfg.causal_always_mn) != p.y:
                bad.append((split, p.id))
    checks.append(("label_recount", not bad, f"{len(bad)} mismatched: {bad[:5]}"))

    bad = []
    if not cfg.causal_always_mn:
        groups = {}
        for p in datasets["train"].points:
            groups.setdefault(p.index, []).append(p.indicator)
        for index, inds in groups.items():
            ones = inds.count(1)
            if abs(ones - (len(inds) - ones)) > (len(inds) % 2):
                bad.append(index)
    checks.append(("indicator_balance", not bad, f"unbalanced indices: {bad[:5]}"))

    train = datasets["train"].points
    frac = sum(p.y for p in train) / len(train) if train else 0.0
    checks.append(("label_balance", abs(frac - 0.5) <= 0.01,
                   f"train label fraction {frac:.4f}"))

    train_seqs = datasets["train"].sequences()
    overlap = [p.id for s in ("dev", "test") for p in datasets[s].points
               if p.x in train_seqs]
    checks.append(("split_disjoint", not overlap,
                   f"{len(overlap)} overlapping: {overlap[:5]}"))

    bad = [s.index for s in specs if len(set(s.tuple)) != 4]
    dup = len(specs) != len({s.index for s in specs})
    checks.append(("spec_distinct", not bad and not dup,
                   f"bad tuples: {bad[:5]}, duplicate indices: {dup}"))

    if cfg.explanation_kind == "recomposable":
        bad = []
        groups = {}
        for p in datasets["train"].points:
            groups.setdefault(p.index, set()).add(p.e.tokens)
        for index, patterns in groups.items():
            if len(patterns) < cfg.pieces:
                bad.append(index)
        checks.append(("piece_coverage", not bad, f"incomplete: {bad[:5]}"))

    return checks
