"""The predictor: in-context classification of test rows against a context.

Row-attention pattern over ``[context; test]``:

* context rows attend to every context row,
* a test row attends to every context row and to itself,
* nothing attends to a test row from elsewhere.

Context rows therefore never depend on test rows, which makes the per-layer
keys/values of the context reusable across test batches (the KV cache) and
makes each test row's logits independent of the rest of its batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tab2d
from . import tensor as T
from .data import MISSING_TARGET, Table
from .errors import ShapeError
from .tab2d import ModelConfig, Params
from .tensor import Tensor

PREFIX = "predictor."


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    p = tab2d.init_encoder(PREFIX, cfg, rng)
    p.update(tab2d.init_stack(PREFIX, cfg, rng))
    L = cfg.embed_dim
    p[PREFIX + "head.w"] = Tensor(rng.normal(0, L**-0.5, (L, cfg.num_classes_max)), requires_grad=True)
    p[PREFIX + "head.b"] = Tensor(np.zeros(cfg.num_classes_max), requires_grad=True)
    return p


def predictor_mask(n_context: int, n_test: int) -> np.ndarray:
    n = n_context + n_test
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_context, :n_context] = True
    mask[n_context:, :n_context] = True
    idx = np.arange(n_context, n)
    mask[idx, idx] = True
    return mask


def _check_classes(n_classes: int, cfg: ModelConfig) -> None:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if n_classes > cfg.num_classes_max:
        raise ValueError(f"{n_classes} classes exceed num_classes_max={cfg.num_classes_max}")


def embed_test(test: Table, params: Params, cfg: ModelConfig) -> Tensor:
    y = np.full(test.n_rows, MISSING_TARGET, dtype=np.int64)
    return tab2d.embed_cells(test.with_target(y), params, PREFIX, cfg, MISSING_TARGET)


def embed_context(train: Table, params: Params, cfg: ModelConfig) -> Tensor:
    return tab2d.embed_cells(train, params, PREFIX, cfg, MISSING_TARGET)


def predict_logits(context: Tensor, test_cube: Tensor, params: Params, cfg: ModelConfig, n_classes: int) -> Tensor:
    """Logits ``T x C`` read from each test row's target cell (autodiff path)."""
    _check_classes(n_classes, cfg)
    kc, t = context.shape[0], test_cube.shape[0]
    if context.shape[1:] != test_cube.shape[1:]:
        raise ShapeError(f"context cells {context.shape[1:]} vs test cells {test_cube.shape[1:]}")
    cube = T.concat([context, test_cube], axis=0)
    cube = tab2d.run_stack(cube, predictor_mask(kc, t), params, PREFIX, cfg)
    m = cube.shape[1] - 1
    z = tab2d.final_norm(T.slice_(cube, (slice(kc, None), m)), params, PREFIX)
    with T.flop_scope("head"):
        logits = T.add(T.matmul(z, params[PREFIX + "head.w"]), params[PREFIX + "head.b"])
    return T.slice_(logits, (slice(None), slice(0, n_classes)))


def predict_from_table(train: Table, test: Table, params: Params, cfg: ModelConfig, n_classes: int | None = None) -> Tensor:
    """The uncompressed (predictor-only) path: embed the labelled table as context."""
    c = n_classes or train.n_classes
    return predict_logits(embed_context(train, params, cfg), embed_test(test, params, cfg), params, cfg, c)


# ---------------------------------------------------------------------------
# numpy inference path with an optional KV cache


@dataclass
class KVCache:
    """Per-block row-attention keys/values of every context token, each ``C x H x K x dh``."""

    keys: list[np.ndarray]
    values: list[np.ndarray]

    @property
    def n_context_rows(self) -> int:
        return self.keys[0].shape[2] if self.keys else 0

    @property
    def n_tokens(self) -> int:
        """Context tokens per layer: rows x (M+1) cells."""
        return self.keys[0].shape[2] * self.keys[0].shape[0] if self.keys else 0

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys) + sum(a.nbytes for a in self.values)


def build_kv_cache(context: np.ndarray, P, cfg: ModelConfig, block_bytes=tab2d.DEFAULT_ATTN_BLOCK_BYTES) -> KVCache:
    """Run the context through the predictor and keep each block's keys/values.

    Context rows only attend among themselves.  The final block's context
    outputs are never read, so that block contributes keys/values only.
    """
    keys, values = [], []
    x = context
    for b in range(cfg.blocks):
        bp = f"{PREFIX}blocks.{b}."
        h = tab2d.np_layer_norm(x, P[bp + "row.ln_g"], P[bp + "row.ln_b"])
        qkv = tab2d.np_linear(h, P[bp + "row.w_qkv"], None, "ctx.row.proj")
        del h
        q, k, v = tab2d.split_heads_rows(qkv, cfg)
        del qkv
        keys.append(k)
        values.append(v)
        if b == cfg.blocks - 1:
            break
        o = tab2d.np_attend(q, k, v, "ctx.row", block_bytes)
        del q
        x = x + tab2d.np_linear(tab2d.merge_heads_rows(o), P[bp + "row.w_o"], P[bp + "row.b_o"], "ctx.row.proj")
        del o
        x = tab2d.np_col_attention(x, P, bp + "col.", cfg, "ctx.")
        x = tab2d.np_feed_forward(x, P, bp + "ffn.", "ctx.")
    return KVCache(keys, values)


def np_predict_with_cache(test_cube: np.ndarray, cache: KVCache, P, cfg: ModelConfig, n_classes: int, block_bytes=tab2d.DEFAULT_ATTN_BLOCK_BYTES) -> np.ndarray:
    """Logits for embedded test rows given a context's KV cache."""
    _check_classes(n_classes, cfg)
    x = test_cube
    for b in range(cfg.blocks):
        bp = f"{PREFIX}blocks.{b}."
        h = tab2d.np_layer_norm(x, P[bp + "row.ln_g"], P[bp + "row.ln_b"])
        qkv = tab2d.np_linear(h, P[bp + "row.w_qkv"], None, "test.row.proj")
        q, k, v = tab2d.split_heads_rows(qkv, cfg)
        if cache.keys[b].shape[:2] != q.shape[:2]:
            raise ShapeError(f"cache cells {cache.keys[b].shape[:2]} vs test cells {q.shape[:2]}")
        o = tab2d.np_attend(q, cache.keys[b], cache.values[b], "test.row", block_bytes, k, v, "test.self")
        x = x + tab2d.np_linear(tab2d.merge_heads_rows(o), P[bp + "row.w_o"], P[bp + "row.b_o"], "test.row.proj")
        x = tab2d.np_col_attention(x, P, bp + "col.", cfg, "test.")
        x = tab2d.np_feed_forward(x, P, bp + "ffn.", "test.")
    m = x.shape[1] - 1
    z = tab2d.np_layer_norm(x[:, m, :].copy(), P[PREFIX + "final_ln.g"], P[PREFIX + "final_ln.b"])
    logits = tab2d.np_linear(z, P[PREFIX + "head.w"], P[PREFIX + "head.b"], "test.head")
    return logits[:, :n_classes]


def np_embed_test(test: Table, P, cfg: ModelConfig, dtype=np.float64) -> np.ndarray:
    y = np.full(test.n_rows, MISSING_TARGET, dtype=np.int64)
    return tab2d.np_embed_cells(test.with_target(y), P, PREFIX, cfg, MISSING_TARGET, dtype)


def np_embed_context(train: Table, P, cfg: ModelConfig, dtype=np.float64) -> np.ndarray:
    return tab2d.np_embed_cells(train, P, PREFIX, cfg, MISSING_TARGET, dtype)


def np_predict_logits(context: np.ndarray, test_cube: np.ndarray, P, cfg: ModelConfig, n_classes: int, block_bytes=tab2d.DEFAULT_ATTN_BLOCK_BYTES) -> np.ndarray:
    """Uncached prediction: recompute the context stream, then the test stream."""
    cache = build_kv_cache(context, P, cfg, block_bytes)
    return np_predict_with_cache(test_cube, cache, P, cfg, n_classes, block_bytes)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
