"""The compressor: N training rows plus K dummy rows in, K latent rows out."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tab2d
from . import tensor as T
from .data import MASK_PLACEHOLDER, Column, Table, concat_tables
from .errors import DataError, ShapeError
from .tab2d import ModelConfig, Params
from .tensor import Tensor

log = logging.getLogger(__name__)

PREFIX = "compressor."
BRIDGE = "bridge."


def rate_to_k(rate: float, n_rows: int, min_k: int = 1, rounding: str = "half_up") -> int:
    """Number of compressed rows for ``rate = K / N``.

    ``half_up`` rounds ``rate * N`` to the nearest integer (ties up); ``ceil``
    rounds up.  The result is clamped to ``[min_k, n_rows]``.
    """
    if not 0 < rate <= 1:
        raise ValueError(f"compression rate must be in (0, 1], got {rate}")
    x = rate * n_rows
    if rounding == "half_up":
        k = math.floor(x + 0.5 + 1e-9)
    elif rounding == "ceil":
        k = math.ceil(x - 1e-9)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    return int(min(n_rows, max(min_k, k)))


@dataclass
class DummyTable:
    X: np.ndarray
    source_indices: np.ndarray
    columns: list[Column]

    @property
    def k(self) -> int:
        return self.X.shape[0]

    @property
    def y(self) -> np.ndarray:
        return np.full(self.k, MASK_PLACEHOLDER, dtype=np.int64)

    def as_table(self, like: Table) -> Table:
        return replace(like, X=self.X, y=self.y, columns=self.columns)


def init_dummy(train: Table, k: int, rng: np.random.Generator) -> DummyTable:
    """Seed K dummy rows with the features of K distinct random training rows.

    Only the feature matrix is read; every dummy target is ``MASK_PLACEHOLDER``.
    """
    n = train.n_rows
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= N, got K={k}, N={n}")
    idx = rng.choice(n, size=k, replace=False)
    X = train.X[idx].copy()
    if k > 1 and np.unique(train.X, axis=0).shape[0] < k:
        log.warning("only %d distinct training rows for K=%d dummies; dummies repeat", np.unique(train.X, axis=0).shape[0], k)
    return DummyTable(X, idx, list(train.columns))


@dataclass
class CompressedContext:
    """K latent rows standing in for a training table of ``n_source_rows`` rows."""

    latents: np.ndarray  # K x (M+1) x L
    n_source_rows: int
    source_fingerprint: str = ""
    compressor_version: str = ""
    schema: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.latents.shape[0]

    @property
    def rate(self) -> float:
        return self.k / self.n_source_rows

    def __post_init__(self):
        if self.latents.ndim != 3:
            raise ShapeError(f"latents must be K x (M+1) x L, got {self.latents.shape}")
        if not np.all(np.isfinite(self.latents)):
            raise DataError("compressed latents are not finite")


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p = tab2d.init_encoder(PREFIX, cfg, rng)
    p.update(tab2d.init_stack(PREFIX, cfg, rng))
    return p


def init_bridge(cfg: ModelConfig, rng: np.random.Generator, hidden_mult: int = 2) -> Params:
    """Two-layer residual MLP.  The second layer starts at zero, so the bridge starts as the identity."""
    L = cfg.embed_dim
    Hd = hidden_mult * L
    return {
        BRIDGE + "w1": Tensor(rng.normal(0, L**-0.5, (L, Hd)), requires_grad=True),
        BRIDGE + "b1": Tensor(np.zeros(Hd), requires_grad=True),
        BRIDGE + "w2": Tensor(np.zeros((Hd, L)), requires_grad=True),
        BRIDGE + "b2": Tensor(np.zeros(L), requires_grad=True),
    }


def _joined(train: Table, dummy: DummyTable) -> Table:
    if train.y is None:
        raise DataError("compressor input needs training labels")
    return concat_tables([train, dummy.as_table(train)])


def compress_tensor(train: Table, dummy: DummyTable, params: Params, cfg: ModelConfig) -> Tensor:
    """Differentiable compression: the final K rows of the stacked cube, final-normed."""
    n = train.n_rows
    cube = tab2d.embed_cells(_joined(train, dummy), params, PREFIX, cfg, sentinel=MASK_PLACEHOLDER)
    cube = tab2d.run_stack(cube, None, params, PREFIX, cfg)
    return tab2d.final_norm(T.slice_(cube, slice(n, None)), params, PREFIX)


def bridge_tensor(x: Tensor, params: Params) -> Tensor:
    h = T.gelu(T.add(T.matmul(x, params[BRIDGE + "w1"]), params[BRIDGE + "b1"]))
    return T.add(x, T.add(T.matmul(h, params[BRIDGE + "w2"]), params[BRIDGE + "b2"]))


def compress(
    train: Table,
    k: int,
    params: Params,
    cfg: ModelConfig,
    rng: np.random.Generator,
    arrays: dict | None = None,
    dtype=np.float64,
    block_bytes: int | None = tab2d.DEFAULT_ATTN_BLOCK_BYTES,
    version: str = "",
) -> CompressedContext:
    """Compress a preprocessed training table into K latent rows (inference path).

    ``arrays`` lets callers pass pre-cast parameter arrays (see
    :func:`taco.tab2d.param_arrays`) to avoid recasting per call.
    """
    P = arrays if arrays is not None else tab2d.param_arrays(params, dtype)
    dummy = init_dummy(train, k, rng)
    n = train.n_rows
    x = tab2d.np_embed_cells(_joined(train, dummy), P, PREFIX, cfg, MASK_PLACEHOLDER, dtype)
    x = tab2d.np_run_stack_dense(x, P, PREFIX, cfg, block_bytes)
    z = tab2d.np_final_norm(x[n:], P, PREFIX)
    return CompressedContext(
        z,
        n_source_rows=n,
        source_fingerprint=train.fingerprint(),
        compressor_version=version,
        schema=train.schema(),
        meta={"source_indices": dummy.source_indices.tolist()},
    )


def bridge(ctx: CompressedContext, params: Params | None = None, arrays: dict | None = None) -> CompressedContext:
    """Apply ``x + W2 GELU(W1 x + b1) + b2`` to every cell latent."""
    P = arrays if arrays is not None else tab2d.param_arrays(params, ctx.latents.dtype)
    x = ctx.latents
    h = tab2d.np_gelu(tab2d.np_linear(x, P[BRIDGE + "w1"], P[BRIDGE + "b1"], "bridge"))
    y = x + tab2d.np_linear(h, P[BRIDGE + "w2"], P[BRIDGE + "b2"], "bridge")
    return replace(ctx, latents=y, meta={**ctx.meta, "bridged": True})
