"""Inference engine: fit a context once, then stream test batches against it.

Modes

* ``taco``: compress the training table to ``K = rate * N`` latent rows (and
  bridge them).  With ``chunking`` the table is split into chunks that are
  compressed one at a time and stitched back together.
* ``pot``: embed the full labelled training table as the predictor context.
* ``random``: embed a uniform subsample of ``K`` labelled rows.
* ``knn``: defer selection to predict time; each test batch gets the union of
  its rows' nearest neighbours trimmed to ``K`` rows.

With ``kv_cache`` the predictor's per-block context keys/values are built at
fit time; otherwise every predict call re-runs the context stream.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import compressor, predictor, tab2d
from . import tensor as T
from .compressor import CompressedContext, rate_to_k
from .data import NUMERIC, PreprocessStats, Table, preprocess
from .errors import CapacityError, DataError, NotFittedError
from .predictor import KVCache
from .tab2d import ModelConfig

MODES = ("taco", "pot", "random", "knn")


@dataclass
class TimingRecord:
    phase: str  # fit | first_predict | subsequent_predict
    wall_ms: float
    peak_bytes: int | None
    mode: str
    N: int
    M: int
    K: int
    cached: bool

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass(frozen=True)
class FitOptions:
    mode: str = "taco"
    rate: float = 0.04
    kv_cache: bool = False
    chunking: bool = False
    chunk_size: int | None = None  # overrides chunk_policy when set
    min_k: int = 1
    k_rounding: str = "half_up"
    preprocessed: bool = False
    dtype: str = "float32"
    block_bytes: int | None = tab2d.DEFAULT_ATTN_BLOCK_BYTES
    track_memory: bool = True
    memory_limit: int | None = None  # bytes; fit refuses contexts whose working set exceeds it
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0 < self.rate <= 1:
            raise ValueError(f"rate must be in (0, 1], got {self.rate}")


@dataclass(frozen=True)
class Model:
    """Trained weights cast once to the inference dtype."""

    arrays: Mapping[str, np.ndarray]
    cfg: ModelConfig
    version: str = ""

    @classmethod
    def from_params(cls, params, cfg: ModelConfig, dtype="float32", version: str = "") -> "Model":
        return cls(tab2d.param_arrays(params, np.dtype(dtype)), cfg, version)

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def has_compressor(self) -> bool:
        return compressor.PREFIX + "final_ln.g" in self.arrays


@dataclass(frozen=True)
class FittedState:
    """Everything predict needs; never mutated after :func:`fit`."""

    mode: str
    options: FitOptions
    n_classes: int
    schema: tuple
    stats: PreprocessStats | None
    n_train: int
    k: int
    context: np.ndarray | None = None  # embedded or compressed context, rows x (M+1) x L
    cache: KVCache | None = None
    knn_train: Table | None = None  # knn defers selection to predict time
    compressed: CompressedContext | None = None
    chunk_plan: "ChunkPlan | None" = None
    fit_record: TimingRecord | None = None

    def __post_init__(self):
        reps = sum(x is not None for x in (self.context, self.knn_train))
        if reps != 1:
            raise ValueError("a fitted state holds exactly one context representation")

    @property
    def n_features(self) -> int:
        return len(self.schema)


class _Probe:
    """Wall time plus (optionally) traced peak bytes of a block."""

    def __init__(self, track_memory: bool):
        self.track = track_memory

    def __enter__(self):
        self._mem = T.measure_peak_bytes() if self.track else None
        self.rec = self._mem.__enter__() if self._mem else None
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.wall_ms = (time.perf_counter() - self.t0) * 1e3
        if self._mem:
            self._mem.__exit__(*exc)
        self.peak = self.rec.peak_bytes if self.rec else None
        return False


# ---------------------------------------------------------------------------
# Chunking


def chunk_policy(n: int) -> int:
    """Chunk size as a function of the dataset size."""
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    if n < 2_000:
        return 500
    if n < 10_000:
        return 1_000
    if n < 20_000:
        return 5_000
    return 10_000


@dataclass
class ChunkPlan:
    chunk_size: int
    bounds: list[tuple[int, int]]
    ks: list[int]

    @property
    def total_k(self) -> int:
        return sum(self.ks)

    @property
    def n_chunks(self) -> int:
        return len(self.bounds)


def plan_chunks(n: int, rate: float, chunk_size: int, min_k: int = 1, rounding: str = "half_up") -> ChunkPlan:
    """Disjoint covering chunks of ``chunk_size`` rows (the last may be shorter)."""
    if chunk_size < 1:
        raise ValueError("chunk size must be >= 1")
    bounds = [(s, min(n, s + chunk_size)) for s in range(0, n, chunk_size)]
    ks = [rate_to_k(rate, b - a, min_k=min_k, rounding=rounding) for a, b in bounds]
    return ChunkPlan(chunk_size, bounds, ks)


def chunk_and_stitch(
    train: Table,
    rate: float,
    model: Model,
    rng: np.random.Generator,
    min_k: int = 1,
    chunk_size: int | None = None,
    rounding: str = "half_up",
    block_bytes: int | None = tab2d.DEFAULT_ATTN_BLOCK_BYTES,
    shuffle: bool = True,
) -> tuple[CompressedContext, ChunkPlan]:
    """Compress chunks one at a time and concatenate their bridged latents.

    Rows are shuffled once (seeded) so chunks are exchangeable.  Only one
    chunk's latent cube is alive at a time; the stitched output is
    preallocated at its final size ``sum(K_c)``.
    """
    n = train.n_rows
    size = chunk_size or chunk_policy(n)
    plan = plan_chunks(n, rate, size, min_k, rounding)
    order = rng.permutation(n) if shuffle else np.arange(n)
    M, L = train.n_features, model.cfg.embed_dim
    out = np.empty((plan.total_k, M + 1, L), dtype=model.dtype)
    row = 0
    for (a, b), k in zip(plan.bounds, plan.ks):
        chunk = train.take(order[a:b])
        ctx = compressor.compress(chunk, k, None, model.cfg, rng, arrays=model.arrays, dtype=model.dtype, block_bytes=block_bytes)
        out[row:row + k] = compressor.bridge(ctx, arrays=model.arrays).latents
        row += k
        del chunk, ctx
    stitched = CompressedContext(
        out,
        n_source_rows=n,
        source_fingerprint=train.fingerprint(),
        compressor_version=model.version,
        schema=train.schema(),
        meta={"chunk_size": size, "chunk_ks": plan.ks, "bridged": True},
    )
    return stitched, plan


# ---------------------------------------------------------------------------
# Baselines


def baseline_random(train: Table, k: int, rng: np.random.Generator) -> Table:
    """Uniform subsample of ``k`` rows without replacement, labels kept."""
    if not 1 <= k <= train.n_rows:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={train.n_rows}")
    return train.take(rng.choice(train.n_rows, size=k, replace=False))


def _knn_space(table: Table) -> np.ndarray:
    num = np.array([c.kind == NUMERIC for c in table.columns], dtype=bool)
    return table.X[:, num] if num.any() else table.X


def knn_indices(train: Table, test: Table, k: int, rng: np.random.Generator) -> np.ndarray:
    """Training row indices selected for a test batch (see :func:`baseline_knn`)."""
    n = train.n_rows
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    if test.n_rows < 1:
        raise ValueError("kNN selection needs a nonempty test batch")
    A, B = _knn_space(train), _knn_space(test)
    d2 = (B * B).sum(1)[:, None] - 2.0 * B @ A.T + (A * A).sum(1)[None, :]
    ranked = np.argsort(d2, axis=1, kind="stable")  # T x N, ties by row index
    owner = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(test.n_rows, dtype=np.int64)
    size = 0
    for level in range(n):
        newly = []
        for t, i in enumerate(ranked[:, level]):
            if owner[i] < 0:
                owner[i] = t
                counts[t] += 1
                newly.append(int(i))
        size += len(newly)
        if size >= k:
            break
    # trim rows first reached at the last level, always from the test point
    # that currently owns the most rows (ties broken at random)
    pool = {t: [i for i in newly if owner[i] == t] for t in set(int(owner[i]) for i in newly)}
    while size > k:
        cand = [t for t, rows in pool.items() if rows]
        top = max(counts[t] for t in cand)
        tied = sorted(t for t in cand if counts[t] == top)
        t = tied[int(rng.integers(len(tied)))]
        rows = pool[t]
        i = rows.pop(int(rng.integers(len(rows))))
        owner[i] = -1
        counts[t] -= 1
        size -= 1
    return np.flatnonzero(owner >= 0)


def baseline_knn(train: Table, test: Table, k: int, rng: np.random.Generator) -> Table:
    """Union of per-test-row nearest neighbours, grown until it holds ``k`` rows.

    The neighbourhood size grows one step at a time; once the union reaches at
    least ``k`` rows, rows added in the final step are removed round-robin from
    whichever test row contributes most, until exactly ``k`` remain.  Distances
    are Euclidean over the preprocessed numeric columns.
    """
    return train.take(knn_indices(train, test, k, rng))


# ---------------------------------------------------------------------------
# fit / predict


def _prep_train(train: Table, opts: FitOptions):
    if opts.preprocessed:
        return train, None
    return preprocess(train)


def _prep_test(state: FittedState, test: Table) -> Table:
    if test.schema() != state.schema:
        raise DataError(f"schema mismatch: test has {test.schema()}, fit saw {state.schema}")
    if state.stats is None:
        return test
    return preprocess(test, state.stats)[0]


def fit(train: Table, model: Model, options: FitOptions | None = None, **kw) -> FittedState:
    """Build the context for ``options.mode`` and record fit time and peak memory."""
    opts = options or FitOptions(**kw)
    if options is not None and kw:
        opts = replace(options, **kw)
    if train.y is None:
        raise DataError("fit needs a labelled training table")
    rng = np.random.default_rng(opts.seed)
    cfg, P, dtype = model.cfg, model.arrays, model.dtype
    if opts.memory_limit is not None:
        rows = train.n_rows
        if opts.mode == "taco" and opts.chunking:
            rows = min(rows, opts.chunk_size or chunk_policy(rows))
        need = working_set_bytes(rows, train.n_features, cfg, dtype.itemsize, opts.block_bytes)
        if need > opts.memory_limit:
            raise CapacityError(f"{opts.mode} context working set ({rows} rows)", need, opts.memory_limit)
    schema = train.schema()
    with _Probe(opts.track_memory) as probe:
        tr, stats = _prep_train(train, opts)
        n, c = tr.n_rows, tr.n_classes
        predictor._check_classes(c, cfg)
        plan = None
        compressed = None
        knn_train = None
        context = None
        if opts.mode == "taco":
            if not model.has_compressor():
                raise DataError("taco mode needs a checkpoint with compressor weights")
            if opts.chunking:
                compressed, plan = chunk_and_stitch(tr, opts.rate, model, rng, opts.min_k, opts.chunk_size, opts.k_rounding, opts.block_bytes)
            else:
                k = rate_to_k(opts.rate, n, opts.min_k, opts.k_rounding)
                compressed = compressor.compress(tr, k, None, cfg, rng, arrays=P, dtype=dtype, block_bytes=opts.block_bytes, version=model.version)
                compressed = compressor.bridge(compressed, arrays=P)
            context = compressed.latents
            k = compressed.k
        elif opts.mode == "pot":
            context = predictor.np_embed_context(tr, P, cfg, dtype)
            k = n
        elif opts.mode == "random":
            k = rate_to_k(opts.rate, n, opts.min_k, opts.k_rounding)
            context = predictor.np_embed_context(baseline_random(tr, k, rng), P, cfg, dtype)
        else:
            k = rate_to_k(opts.rate, n, opts.min_k, opts.k_rounding)
            knn_train = tr
        cache = None
        if opts.kv_cache and context is not None:
            cache = predictor.build_kv_cache(context, P, cfg, opts.block_bytes)
    rec = TimingRecord("fit", probe.wall_ms, probe.peak, opts.mode, n, tr.n_features, k, opts.kv_cache)
    return FittedState(opts.mode, opts, c, schema, stats, n, k, context, cache, knn_train, compressed, plan, rec)


def _knn_context(state: FittedState, test: Table, model: Model) -> np.ndarray:
    rng = np.random.default_rng([state.options.seed, 1])
    sub = baseline_knn(state.knn_train, test, state.k, rng)
    return predictor.np_embed_context(sub, model.arrays, model.cfg, model.dtype)


def predict(state: FittedState, test: Table, model: Model, phase: str = "subsequent_predict") -> tuple[np.ndarray, TimingRecord]:
    """Class probabilities ``T x C`` for a test batch plus its timing record.

    The state is read-only, so calls are independent of each other and of
    their order.
    """
    if state is None:
        raise NotFittedError("predict called before fit")
    opts = state.options
    with _Probe(opts.track_memory) as probe:
        te = _prep_test(state, test)
        P, cfg = model.arrays, model.cfg
        test_cube = predictor.np_embed_test(te, P, cfg, model.dtype)
        if state.knn_train is not None:
            ctx = _knn_context(state, te, model)
            cache = predictor.build_kv_cache(ctx, P, cfg, opts.block_bytes)
        elif state.cache is not None:
            cache = state.cache
        else:
            cache = predictor.build_kv_cache(state.context, P, cfg, opts.block_bytes)
        logits = predictor.np_predict_with_cache(test_cube, cache, P, cfg, state.n_classes, opts.block_bytes)
        proba = predictor.softmax_np(logits.astype(np.float64))
    rec = TimingRecord(phase, probe.wall_ms, probe.peak, state.mode, state.n_train, state.n_features, state.k, state.cache is not None)
    return proba, rec


def stream_predict(state: FittedState, batches: Iterable[Table], model: Model) -> tuple[list[np.ndarray], list[TimingRecord]]:
    """Predict batches in order; the first record is tagged ``first_predict``."""
    probs, recs = [], []
    for i, b in enumerate(batches):
        p, r = predict(state, b, model, "first_predict" if i == 0 else "subsequent_predict")
        probs.append(p)
        recs.append(r)
    return probs, recs


def split_batches(table: Table, n_batches: int) -> list[Table]:
    if not 1 <= n_batches <= table.n_rows:
        raise ValueError(f"cannot split {table.n_rows} rows into {n_batches} batches")
    return [table.take(ix) for ix in np.array_split(np.arange(table.n_rows), n_batches)]


def write_records(records: Sequence[TimingRecord], path: str | Path) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def working_set_bytes(rows: int, M: int, cfg: ModelConfig, itemsize: int, block_bytes: int | None) -> int:
    """Rough live bytes of one stack pass over ``rows`` context rows.

    About eight cube-sized buffers (residual, normed copy, q/k/v, mixed
    output, FFN hidden at 4x counted as four) plus one attention score block.
    """
    cube = rows * (M + 1) * cfg.embed_dim * itemsize
    scores = block_bytes if block_bytes is not None else rows * rows * (M + 1) * cfg.heads * itemsize
    return 8 * cube + int(scores)


# ---------------------------------------------------------------------------
# Analytic cost model


@dataclass
class CostEstimate:
    """Multiply-accumulates per counter tag, for the fit and the predict phase."""

    fit_macs: dict[str, int]
    predict_macs: dict[str, int]
    cache_bytes: int
    context_rows: int

    @property
    def attention_macs(self) -> int:
        """Score and mixing MACs of a predict call (both phases when uncached)."""
        return sum(v for k, v in self.predict_macs.items() if k.endswith((".qk", ".av")))

    @property
    def attention_flops(self) -> int:
        return 2 * self.attention_macs

    def term(self, tag: str) -> int:
        return self.predict_macs.get(tag, 0) + self.fit_macs.get(tag, 0)


def stack_macs(rows: int, M: int, L: int, B: int, ffn_mult: int = 4, stream: str = "") -> dict[str, int]:
    """MACs of ``B`` dense blocks over ``rows x (M+1)`` cells (every row sees every row)."""
    c = M + 1
    return {
        stream + "row.proj": B * rows * c * 4 * L * L,
        stream + "row.qk": B * c * rows * rows * L,
        stream + "row.av": B * c * rows * rows * L,
        stream + "col.proj": B * rows * c * 4 * L * L,
        stream + "col.qk": B * rows * c * c * L,
        stream + "col.av": B * rows * c * c * L,
        stream + "ffn": B * rows * c * 2 * L * ffn_mult * L,
    }


def context_stream_macs(nc: int, M: int, L: int, B: int, ffn_mult: int = 4) -> dict[str, int]:
    """Predictor context pass: keys/values in all blocks, updates in all but the last."""
    c = M + 1
    full = stack_macs(nc, M, L, B - 1, ffn_mult, "ctx.") if B > 1 else {}
    full[("ctx.row.proj")] = full.get("ctx.row.proj", 0) + nc * c * 3 * L * L  # last block: K, V (and Q) projection
    return {k: v for k, v in full.items() if v}


def test_stream_macs(t: int, nc: int, M: int, L: int, B: int, ffn_mult: int = 4, classes_max: int = 10) -> dict[str, int]:
    c = M + 1
    return {
        "test.row.proj": B * t * c * 4 * L * L,
        "test.row.qk": B * c * t * nc * L,
        "test.row.av": B * c * t * nc * L,
        "test.self.qk": B * c * t * L,
        "test.self.av": B * c * t * L,
        "test.col.proj": B * t * c * 4 * L * L,
        "test.col.qk": B * t * c * c * L,
        "test.col.av": B * t * c * c * L,
        "test.ffn": B * t * c * 2 * L * ffn_mult * L,
        "test.head": t * L * classes_max,
    }


def cost_model(
    N: int,
    M: int,
    K: int,
    L: int,
    B: int,
    H: int,
    cached: bool,
    mode: str,
    n_test: int = 1,
    ffn_mult: int = 4,
    classes_max: int = 10,
    itemsize: int = 4,
) -> CostEstimate:
    """Closed-form MAC counts keyed like the runtime counter.

    ``mode='pot'`` uses all ``N`` rows as context, every other mode ``K``.
    TACO's fit pays a dense compressor pass over ``N + K`` rows plus the
    bridge.  Without a cache the context stream is paid by every predict
    call; with one it moves to fit.  Head count does not change MACs, it only
    has to divide ``L``.
    """
    for name, v in (("N", N), ("M", M), ("K", K), ("L", L), ("B", B), ("H", H)):
        if v < 1:
            raise ValueError(f"{name} must be positive")
    if L % H:
        raise ValueError("L must be divisible by H")
    nc = N if mode == "pot" else K
    fit: dict[str, int] = {}
    if mode == "taco":
        fit.update(stack_macs(N + K, M, L, B, ffn_mult))
        fit["bridge"] = K * (M + 1) * 4 * L * L
    ctx = context_stream_macs(nc, M, L, B, ffn_mult)
    pred = test_stream_macs(n_test, nc, M, L, B, ffn_mult, classes_max)
    if cached:
        fit.update(ctx)
    else:
        pred.update(ctx)
    cache = 2 * B * nc * (M + 1) * L * itemsize
    return CostEstimate(fit, pred, cache if cached else 0, nc)
