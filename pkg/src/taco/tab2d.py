"""Cell encoder and 2D (row-wise / column-wise) attention blocks.

A table with R rows and M features becomes a latent cube of shape
``R x (M+1) x L``: one L-dim token per cell, the last column holding the
target.  Each block applies, pre-norm with residuals,

1. row attention: for every column, attention across rows under a row mask,
2. column attention: for every row, full attention across its M+1 cells,
3. a position-wise GELU feed-forward layer.

There is no positional information across feature columns, so the stack is
equivariant to permuting them.

Two forward implementations share one parameter dict:

* the ``Tensor`` functions (``embed_cells``, ``row_attention`` ...) record an
  autodiff graph and are used for training;
* the ``np_*`` functions run on raw numpy arrays, process attention in query
  blocks sized by a byte budget, and are used by the inference engine.

Both count multiply-accumulates under the same scope names, which is what the
analytic cost model in :mod:`taco.infer` is checked against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import MASK_PLACEHOLDER, MISSING_TARGET, UNSEEN_CATEGORY, Table
from .errors import CapacityError, ConfigError, DataError, ShapeError
from .tensor import Tensor

NEG_INF = -1e30
DEFAULT_ATTN_BLOCK_BYTES = 32 * 2**20


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    blocks: int = 3
    heads: int = 4
    ffn_mult: int = 4
    num_classes_max: int = 10
    max_categories: int = 32

    def __post_init__(self):
        for name in ("embed_dim", "heads", "ffn_mult", "num_classes_max", "max_categories"):
            if getattr(self, name) < 1:
                raise ConfigError("must be a positive integer", field=name)
        if self.blocks < 0:
            raise ConfigError("must be >= 0", field="blocks")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}", field="heads")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict  # name -> Tensor


# ---------------------------------------------------------------------------
# Parameter initialisation


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def init_encoder(prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Encoder weights.  The label table has one extra slot for the module's sentinel."""
    L = cfg.embed_dim
    return {
        f"{prefix}enc.num_w": _normal(rng, (L,), 1.0),
        f"{prefix}enc.num_b": _normal(rng, (L,), 0.1),
        f"{prefix}enc.cat_emb": _normal(rng, (cfg.max_categories + 1, L), 1.0),
        f"{prefix}enc.label_emb": _normal(rng, (cfg.num_classes_max + 1, L), 1.0),
        f"{prefix}enc.target_role": _normal(rng, (L,), 0.1),
    }


def _init_attn(prefix: str, cfg: ModelConfig, rng, out_std: float) -> Params:
    L = cfg.embed_dim
    return {
        f"{prefix}ln_g": Tensor(np.ones(L), requires_grad=True),
        f"{prefix}ln_b": Tensor(np.zeros(L), requires_grad=True),
        f"{prefix}w_qkv": _normal(rng, (L, 3 * L), L**-0.5),
        f"{prefix}w_o": _normal(rng, (L, L), out_std),
        f"{prefix}b_o": Tensor(np.zeros(L), requires_grad=True),
    }


def init_stack(prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> Params:
    L, F = cfg.embed_dim, cfg.ffn_dim
    out_std = L**-0.5 / np.sqrt(2 * max(cfg.blocks, 1))
    p: Params = {}
    for b in range(cfg.blocks):
        bp = f"{prefix}blocks.{b}."
        p.update(_init_attn(bp + "row.", cfg, rng, out_std))
        p.update(_init_attn(bp + "col.", cfg, rng, out_std))
        p.update(
            {
                bp + "ffn.ln_g": Tensor(np.ones(L), requires_grad=True),
                bp + "ffn.ln_b": Tensor(np.zeros(L), requires_grad=True),
                bp + "ffn.w1": _normal(rng, (L, F), L**-0.5),
                bp + "ffn.b1": Tensor(np.zeros(F), requires_grad=True),
                bp + "ffn.w2": _normal(rng, (F, L), F**-0.5 / np.sqrt(2 * max(cfg.blocks, 1))),
                bp + "ffn.b2": Tensor(np.zeros(L), requires_grad=True),
            }
        )
    p[f"{prefix}final_ln.g"] = Tensor(np.ones(L), requires_grad=True)
    p[f"{prefix}final_ln.b"] = Tensor(np.zeros(L), requires_grad=True)
    return p


# ---------------------------------------------------------------------------
# Encoder


def _encoder_inputs(table: Table, cfg: ModelConfig, sentinel: int):
    X = table.X
    if not np.all(np.isfinite(X)):
        raise DataError("embed_cells: non-finite feature value; preprocess the table first")
    if table.y is None:
        raise DataError("embed_cells: table has no target column")
    is_cat = table.is_categorical
    ids = np.zeros(X.shape, dtype=np.int64)
    if is_cat.any():
        raw = X[:, is_cat].astype(np.int64)
        raw = np.where(raw == UNSEEN_CATEGORY, cfg.max_categories, np.minimum(raw, cfg.max_categories - 1))
        if (raw < 0).any():
            raise DataError("embed_cells: negative category id")
        ids[:, is_cat] = raw
    y = table.y
    bad = (y < 0) & (y != sentinel)
    if bad.any():
        raise DataError(f"embed_cells: label sentinel {int(y[bad][0])} not accepted here (expects {sentinel})")
    if (y >= cfg.num_classes_max).any():
        raise DataError(f"embed_cells: label exceeds num_classes_max={cfg.num_classes_max}")
    label_ids = np.where(y == sentinel, cfg.num_classes_max, y)
    return X, ids, is_cat, label_ids


def embed_cells(table: Table, params: Params, prefix: str, cfg: ModelConfig, sentinel: int = MISSING_TARGET) -> Tensor:
    """Embed a preprocessed table into an ``R x (M+1) x L`` cube.

    Numeric cells: ``value * num_w + num_b``.  Categorical cells: a lookup in
    ``cat_emb``.  Target cells: ``label_emb[label] + target_role``, with the
    sentinel (``MISSING_TARGET`` for the predictor, ``MASK_PLACEHOLDER`` for the
    compressor) mapped to its own learned slot.
    """
    X, ids, is_cat, label_ids = _encoder_inputs(table, cfg, sentinel)
    w, b = params[prefix + "enc.num_w"], params[prefix + "enc.num_b"]
    feats = T.add(T.mul(X[:, :, None], w), b)
    if is_cat.any():
        cat = T.embedding(params[prefix + "enc.cat_emb"], ids)
        sel = is_cat[None, :, None].astype(X.dtype)
        feats = T.add(T.mul(feats, 1.0 - sel), T.mul(cat, sel))
    tgt = T.add(T.embedding(params[prefix + "enc.label_emb"], label_ids[:, None]), params[prefix + "enc.target_role"])
    return T.concat([feats, tgt], axis=1)


def np_embed_cells(table: Table, P: Mapping[str, np.ndarray], prefix: str, cfg: ModelConfig, sentinel: int = MISSING_TARGET, dtype=np.float64) -> np.ndarray:
    X, ids, is_cat, label_ids = _encoder_inputs(table, cfg, sentinel)
    R, M = X.shape
    L = cfg.embed_dim
    out = np.empty((R, M + 1, L), dtype=dtype)
    out[:, :M] = X[:, :, None].astype(dtype) * P[prefix + "enc.num_w"] + P[prefix + "enc.num_b"]
    if is_cat.any():
        cols = np.flatnonzero(is_cat)
        out[:, cols] = P[prefix + "enc.cat_emb"][ids[:, cols]]
    out[:, M] = P[prefix + "enc.label_emb"][label_ids] + P[prefix + "enc.target_role"]
    return out


# ---------------------------------------------------------------------------
# Autodiff attention blocks


def _affine_ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), g), b)


def _mha(h: Tensor, params: Params, pre: str, cfg: ModelConfig, axis: str, mask_add: np.ndarray | None) -> Tensor:
    """Multi-head attention over rows (``axis='row'``) or columns of a normed cube."""
    R, C, L = h.shape
    H, dh = cfg.heads, cfg.head_dim
    with T.flop_scope(f"{axis}.proj"):
        qkv = T.reshape(T.matmul(h, params[pre + "w_qkv"]), (R, C, 3, H, dh))
    if axis == "row":
        qkv = T.transpose(qkv, (2, 1, 3, 0, 4))  # 3, C, H, R, dh
    else:
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, R, H, C, dh
    q, k, v = T.slice_(qkv, 0), T.slice_(qkv, 1), T.slice_(qkv, 2)
    with T.flop_scope(f"{axis}.qk"):
        scores = T.matmul(T.scale(q, dh**-0.5), T.transpose(k, (0, 1, 3, 2)))
    if mask_add is not None:
        scores = T.add(scores, mask_add)
    att = T.softmax(scores)
    with T.flop_scope(f"{axis}.av"):
        mixed = T.matmul(att, v)
    if axis == "row":
        mixed = T.transpose(mixed, (2, 0, 1, 3))  # R, C, H, dh
    else:
        mixed = T.transpose(mixed, (0, 2, 1, 3))
    mixed = T.reshape(mixed, (R, C, L))
    with T.flop_scope(f"{axis}.proj"):
        return T.add(T.matmul(mixed, params[pre + "w_o"]), params[pre + "b_o"])


def mask_to_additive(mask: np.ndarray | None, dtype=np.float64) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ShapeError(f"row mask must be square, got {mask.shape}")
    if not mask.any(axis=1).all():
        raise ShapeError("row mask has a row with no allowed keys")
    return np.where(mask, 0.0, NEG_INF).astype(dtype)


def row_attention(cube: Tensor, mask: np.ndarray | None, params: Params, pre: str, cfg: ModelConfig) -> Tensor:
    """Residual row attention: every column attends across rows under ``mask``.

    ``mask[i, j]`` allows row i to read row j; ``None`` means all-true.  The
    diagonal must be allowed.
    """
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (cube.shape[0],) * 2:
            raise ShapeError(f"row mask {mask.shape} does not match {cube.shape[0]} rows")
        if not np.diag(mask).all():
            raise ShapeError("row mask must allow each row to attend to itself")
    h = _affine_ln(cube, params[pre + "ln_g"], params[pre + "ln_b"])
    return T.add(cube, _mha(h, params, pre, cfg, "row", mask_to_additive(mask, cube.dtype)))


def col_attention(cube: Tensor, params: Params, pre: str, cfg: ModelConfig) -> Tensor:
    """Residual attention across the M+1 cells of each row (unmasked)."""
    h = _affine_ln(cube, params[pre + "ln_g"], params[pre + "ln_b"])
    return T.add(cube, _mha(h, params, pre, cfg, "col", None))


def feed_forward(cube: Tensor, params: Params, pre: str) -> Tensor:
    h = _affine_ln(cube, params[pre + "ln_g"], params[pre + "ln_b"])
    with T.flop_scope("ffn"):
        h = T.gelu(T.add(T.matmul(h, params[pre + "w1"]), params[pre + "b1"]))
        h = T.add(T.matmul(h, params[pre + "w2"]), params[pre + "b2"])
    return T.add(cube, h)


def transformer_block(cube: Tensor, mask, params: Params, prefix: str, b: int, cfg: ModelConfig) -> Tensor:
    bp = f"{prefix}blocks.{b}."
    x = row_attention(cube, mask, params, bp + "row.", cfg)
    x = col_attention(x, params, bp + "col.", cfg)
    return feed_forward(x, params, bp + "ffn.")


def run_stack(cube: Tensor, mask, params: Params, prefix: str, cfg: ModelConfig) -> Tensor:
    """All ``cfg.blocks`` blocks; the identity when there are none."""
    for b in range(cfg.blocks):
        cube = transformer_block(cube, mask, params, prefix, b, cfg)
    return cube


def final_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return _affine_ln(x, params[prefix + "final_ln.g"], params[prefix + "final_ln.b"])


# ---------------------------------------------------------------------------
# numpy inference path


def param_arrays(params: Params, dtype=np.float64) -> dict[str, np.ndarray]:
    return {k: np.ascontiguousarray(v.data, dtype=dtype) for k, v in params.items()}


def np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = T.LAYER_NORM_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    xc *= 1.0 / np.sqrt(var + eps)
    xc *= g
    xc += b
    return xc


def np_linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, tag: str) -> np.ndarray:
    out = (x.reshape(-1, w.shape[0]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    T.record_macs(out.size * w.shape[0], tag)
    if b is not None:
        out += b
    return out


def np_gelu(x: np.ndarray) -> np.ndarray:
    inner = T._GELU_C * x * (1.0 + 0.044715 * (x * x))
    return 0.5 * x * (1.0 + np.tanh(inner))


def split_heads_rows(qkv: np.ndarray, cfg: ModelConfig):
    """``R x C x 3L`` -> q, k, v each ``C x H x R x dh``."""
    R, C, _ = qkv.shape
    t = qkv.reshape(R, C, 3, cfg.heads, cfg.head_dim).transpose(2, 1, 3, 0, 4)
    return np.ascontiguousarray(t[0]), np.ascontiguousarray(t[1]), np.ascontiguousarray(t[2])


def merge_heads_rows(o: np.ndarray) -> np.ndarray:
    """``C x H x R x dh`` -> ``R x C x L``."""
    C, H, R, dh = o.shape
    return np.ascontiguousarray(o.transpose(2, 0, 1, 3)).reshape(R, C, H * dh)


def query_block_rows(n_queries: int, n_keys: int, batch: int, itemsize: int, budget: int | None) -> int:
    """How many query rows fit in one score buffer of ``budget`` bytes."""
    per_row = batch * n_keys * itemsize
    if budget is None:
        return n_queries
    rows = budget // per_row
    if rows < 1:
        raise CapacityError("attention score block", per_row, budget)
    return int(min(n_queries, rows))


def np_attend(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    tag: str,
    block_bytes: int | None = DEFAULT_ATTN_BLOCK_BYTES,
    extra_k: np.ndarray | None = None,
    extra_v: np.ndarray | None = None,
    extra_tag: str | None = None,
) -> np.ndarray:
    """Softmax attention of ``q`` over keys ``k`` in blocks of query rows.

    Shapes: ``q`` is ``(..., Rq, dh)``, ``k``/``v`` are ``(..., Rk, dh)``.  If
    ``extra_k``/``extra_v`` (shaped like ``q``) are given, each query also
    attends to its own extra key, used for a test row attending to itself next
    to the cached context.  MACs are recorded as ``{tag}.qk`` / ``{tag}.av``.
    """
    batch = int(np.prod(q.shape[:-2]))
    Rq, dh = q.shape[-2:]
    Rk = k.shape[-2]
    sc = dh**-0.5
    out = np.empty(q.shape, dtype=q.dtype)
    kt = np.swapaxes(k, -1, -2)
    step = query_block_rows(Rq, Rk, batch, q.dtype.itemsize, block_bytes)
    T.record_macs(batch * Rq * Rk * dh, f"{tag}.qk")
    T.record_macs(batch * Rq * Rk * dh, f"{tag}.av")
    if extra_k is not None:
        T.record_macs(batch * Rq * dh, f"{extra_tag}.qk")
        T.record_macs(batch * Rq * dh, f"{extra_tag}.av")
    for s0 in range(0, Rq, step):
        s1 = min(Rq, s0 + step)
        qb = q[..., s0:s1, :] * sc
        s = np.matmul(qb, kt)
        m = s.max(axis=-1, keepdims=True)
        if extra_k is not None:
            se = (qb * extra_k[..., s0:s1, :]).sum(axis=-1, keepdims=True)
            m = np.maximum(m, se)
            ee = np.exp(se - m)
        s -= m
        np.exp(s, out=s)
        z = s.sum(axis=-1, keepdims=True)
        ob = np.matmul(s, v)
        if extra_k is not None:
            z += ee
            ob += ee * extra_v[..., s0:s1, :]
        ob /= z
        out[..., s0:s1, :] = ob
        del s
    return out


def np_row_attention_dense(x: np.ndarray, P, pre: str, cfg: ModelConfig, block_bytes=DEFAULT_ATTN_BLOCK_BYTES, stream: str = "") -> np.ndarray:
    h = np_layer_norm(x, P[pre + "ln_g"], P[pre + "ln_b"])
    qkv = np_linear(h, P[pre + "w_qkv"], None, stream + "row.proj")
    del h
    q, k, v = split_heads_rows(qkv, cfg)
    del qkv
    o = np_attend(q, k, v, stream + "row", block_bytes)
    return x + np_linear(merge_heads_rows(o), P[pre + "w_o"], P[pre + "b_o"], stream + "row.proj")


def np_col_attention(x: np.ndarray, P, pre: str, cfg: ModelConfig, stream: str = "") -> np.ndarray:
    R, C, L = x.shape
    H, dh = cfg.heads, cfg.head_dim
    h = np_layer_norm(x, P[pre + "ln_g"], P[pre + "ln_b"])
    qkv = np_linear(h, P[pre + "w_qkv"], None, stream + "col.proj").reshape(R, C, 3, H, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]  # R, H, C, dh
    o = np_attend(q, k, v, stream + "col", None)
    o = np.ascontiguousarray(o.transpose(0, 2, 1, 3)).reshape(R, C, L)
    return x + np_linear(o, P[pre + "w_o"], P[pre + "b_o"], stream + "col.proj")


def np_feed_forward(x: np.ndarray, P, pre: str, stream: str = "") -> np.ndarray:
    h = np_layer_norm(x, P[pre + "ln_g"], P[pre + "ln_b"])
    h = np_gelu(np_linear(h, P[pre + "w1"], P[pre + "b1"], stream + "ffn"))
    return x + np_linear(h, P[pre + "w2"], P[pre + "b2"], stream + "ffn")


def np_run_stack_dense(x: np.ndarray, P, prefix: str, cfg: ModelConfig, block_bytes=DEFAULT_ATTN_BLOCK_BYTES) -> np.ndarray:
    """All blocks with full bidirectional row attention (the compressor's pattern)."""
    for b in range(cfg.blocks):
        bp = f"{prefix}blocks.{b}."
        x = np_row_attention_dense(x, P, bp + "row.", cfg, block_bytes)
        x = np_col_attention(x, P, bp + "col.", cfg)
        x = np_feed_forward(x, P, bp + "ffn.")
    return x


def np_final_norm(x: np.ndarray, P, prefix: str) -> np.ndarray:
    return np_layer_norm(x.copy(), P[prefix + "final_ln.g"], P[prefix + "final_ln.b"])


__all__ = [
    "MASK_PLACEHOLDER",
    "MISSING_TARGET",
    "ModelConfig",
    "col_attention",
    "embed_cells",
    "row_attention",
    "run_stack",
    "transformer_block",
]
