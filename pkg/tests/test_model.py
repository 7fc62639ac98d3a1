from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taco import compressor, predictor, tab2d
from taco import tensor as T
from taco.data import MASK_PLACEHOLDER, MISSING_TARGET, preprocess
from taco.errors import CapacityError, ConfigError, DataError, ShapeError
from taco.tab2d import ModelConfig

from conftest import make_table


def arrays(params):
    return tab2d.param_arrays(params, np.float64)


def prepped(n, m, seed=0, n_classes=2, categorical=()):
    t, _ = preprocess(make_table(n, m, n_classes, seed, categorical))
    return t


# ---------------------------------------------------------------------------
# tab2d


def test_model_config_validation():
    with pytest.raises(ConfigError) as e:
        ModelConfig(embed_dim=10, heads=3)
    assert e.value.field == "heads"
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=0)


def test_embedding_shape_and_sentinels(tiny_cfg, tiny_params):
    t = prepped(5, 3, categorical=(1,))
    cube = tab2d.embed_cells(t, tiny_params, predictor.PREFIX, tiny_cfg)
    assert cube.shape == (5, 4, tiny_cfg.embed_dim)
    # the compressor's placeholder is not accepted by the predictor encoder
    with pytest.raises(DataError):
        tab2d.embed_cells(t.with_target(np.full(5, MASK_PLACEHOLDER)), tiny_params, predictor.PREFIX, tiny_cfg)
    bad = t.with_target(np.ones(5, dtype=int))
    bad.X[0, 0] = np.nan
    with pytest.raises(DataError):
        tab2d.embed_cells(bad, tiny_params, predictor.PREFIX, tiny_cfg)


def test_missing_and_placeholder_use_distinct_slots(tiny_cfg, tiny_params):
    P = arrays(tiny_params)
    t = prepped(2, 2)
    a = tab2d.np_embed_cells(t.with_target(np.full(2, MISSING_TARGET)), P, compressor.PREFIX, tiny_cfg, MISSING_TARGET)
    b = tab2d.np_embed_cells(t.with_target(np.full(2, MASK_PLACEHOLDER)), P, compressor.PREFIX, tiny_cfg, MASK_PLACEHOLDER)
    np.testing.assert_array_equal(a, b)  # both map to the reserved row of their own module
    c = tab2d.np_embed_cells(t.with_target(np.zeros(2, dtype=int)), P, compressor.PREFIX, tiny_cfg, MASK_PLACEHOLDER)
    assert not np.allclose(b[:, -1], c[:, -1])


def test_autodiff_and_numpy_paths_agree(tiny_cfg, tiny_params):
    t = prepped(9, 3, categorical=(0,))
    P = arrays(tiny_params)
    auto = tab2d.run_stack(tab2d.embed_cells(t, tiny_params, compressor.PREFIX, tiny_cfg, MASK_PLACEHOLDER), None, tiny_params, compressor.PREFIX, tiny_cfg)
    fast = tab2d.np_run_stack_dense(tab2d.np_embed_cells(t, P, compressor.PREFIX, tiny_cfg, MASK_PLACEHOLDER), P, compressor.PREFIX, tiny_cfg)
    np.testing.assert_allclose(auto.data, fast, atol=1e-12)


@given(st.permutations(range(4)))
def test_feature_permutation_equivariance(perm):
    cfg = ModelConfig(embed_dim=8, blocks=2, heads=2)
    from taco.train import init_model

    P = arrays(init_model(cfg, seed=1, kind="pot"))
    x = np.random.default_rng(0).normal(size=(6, 5, 8))
    cols = list(perm) + [4]  # target column stays last
    out = tab2d.np_run_stack_dense(x, P, predictor.PREFIX, cfg)
    out_p = tab2d.np_run_stack_dense(x[:, cols], P, predictor.PREFIX, cfg)
    np.testing.assert_allclose(out_p, out[:, cols], atol=1e-10)


def test_column_attention_is_row_local(tiny_cfg, tiny_params):
    P = arrays(tiny_params)
    x = np.random.default_rng(1).normal(size=(3, 4, tiny_cfg.embed_dim))
    y = x.copy()
    y[1] += 5.0
    pre = predictor.PREFIX + "blocks.0.col."
    a, b = tab2d.np_col_attention(x, P, pre, tiny_cfg), tab2d.np_col_attention(y, P, pre, tiny_cfg)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.allclose(a[1], b[1])


def test_blocked_attention_matches_single_block():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(3, 2, 50, 4)), rng.normal(size=(3, 2, 60, 4)), rng.normal(size=(3, 2, 60, 4))
    full = tab2d.np_attend(q, k, v, "t", None)
    tiny = tab2d.np_attend(q, k, v, "t", 3 * 2 * 60 * 8 * 7)  # 7 query rows per block
    np.testing.assert_allclose(tiny, full, atol=1e-12)
    s = np.einsum("bhqd,bhkd->bhqk", q, k) / 2.0
    w = np.exp(s - s.max(-1, keepdims=True))
    np.testing.assert_allclose(full, (w / w.sum(-1, keepdims=True)) @ v, atol=1e-12)


def test_attention_budget_too_small_is_capacity_error():
    with pytest.raises(CapacityError):
        tab2d.query_block_rows(10, 1000, 4, 8, 100)


def test_row_mask_blocks_gradient(tiny_cfg, tiny_params):
    """A masked-out key row has an exactly zero Jacobian on the query row's output."""
    x = T.Tensor(np.random.default_rng(3).normal(size=(4, 3, tiny_cfg.embed_dim)), requires_grad=True)
    mask = predictor.predictor_mask(2, 2)
    out = tab2d.row_attention(x, mask, tiny_params, predictor.PREFIX + "blocks.0.row.", tiny_cfg)
    g = T.backward(T.sum_(T.slice_(out, 2)), [x])[x]  # test row 2 may not see test row 3
    assert np.all(g[3] == 0) and np.abs(g[:3]).sum() > 0
    g = T.backward(T.sum_(T.slice_(out, slice(0, 2))), [x])[x]  # context never sees the test rows
    assert np.all(g[2:] == 0)


# ---------------------------------------------------------------------------
# compressor


@pytest.mark.parametrize(
    "rate,n,min_k,rounding,k",
    [(0.04, 100, 1, "half_up", 4), (0.01, 50, 1, "half_up", 1), (0.025, 100, 1, "half_up", 3), (0.001, 748, 2, "half_up", 2), (0.01, 150, 1, "ceil", 2), (1.0, 7, 1, "half_up", 7)],
)
def test_rate_to_k(rate, n, min_k, rounding, k):
    assert compressor.rate_to_k(rate, n, min_k, rounding) == k


@pytest.mark.parametrize("rate", [0.0, -0.1, 1.5])
def test_rate_to_k_rejects_bad_rate(rate):
    with pytest.raises(ValueError):
        compressor.rate_to_k(rate, 10)


def test_init_dummy_contract():
    t = prepped(10, 3, seed=4)
    d1 = compressor.init_dummy(t, 3, np.random.default_rng(42))
    d2 = compressor.init_dummy(t, 3, np.random.default_rng(42))
    assert np.array_equal(d1.source_indices, d2.source_indices)
    assert len(set(d1.source_indices.tolist())) == 3
    assert np.all(d1.y == MASK_PLACEHOLDER)
    np.testing.assert_array_equal(d1.X, t.X[d1.source_indices])
    full = compressor.init_dummy(t, 10, np.random.default_rng(0))
    assert sorted(full.source_indices.tolist()) == list(range(10))
    with pytest.raises(ValueError):
        compressor.init_dummy(t, 11, np.random.default_rng(0))


@given(st.integers(0, 2**31), st.integers(1, 8))
def test_init_dummy_is_label_blind(seed, k):
    t = prepped(8, 2, seed=1)
    other = t.with_target(np.random.default_rng(seed).integers(0, 2, 8))
    a = compressor.init_dummy(t, k, np.random.default_rng(seed))
    b = compressor.init_dummy(other, k, np.random.default_rng(seed))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y) and np.array_equal(a.source_indices, b.source_indices)


def test_compress_shape_determinism_and_fingerprint(tiny_cfg, tiny_params):
    t = prepped(100, 3, seed=5)
    k = compressor.rate_to_k(0.04, 100)
    a = compressor.compress(t, k, tiny_params, tiny_cfg, np.random.default_rng(9))
    b = compressor.compress(t, k, tiny_params, tiny_cfg, np.random.default_rng(9))
    assert a.latents.shape == (4, 4, tiny_cfg.embed_dim) and a.rate == 0.04
    np.testing.assert_array_equal(a.latents, b.latents)
    assert a.source_fingerprint == b.source_fingerprint == t.fingerprint()


def test_compress_matches_autodiff_path(tiny_cfg, tiny_params):
    t = prepped(20, 2, seed=6)
    ctx = compressor.compress(t, 3, tiny_params, tiny_cfg, np.random.default_rng(1))
    dummy = compressor.init_dummy(t, 3, np.random.default_rng(1))
    np.testing.assert_allclose(compressor.compress_tensor(t, dummy, tiny_params, tiny_cfg).data, ctx.latents, atol=1e-12)


def test_identical_rows_give_identical_latents(tiny_cfg, tiny_params):
    t = prepped(12, 3, seed=7)
    t = t.with_target(np.zeros(12, dtype=int))
    t.X[:] = t.X[0]
    z = compressor.compress(t, 4, tiny_params, tiny_cfg, np.random.default_rng(0)).latents
    for i in range(1, 4):
        np.testing.assert_allclose(z[i], z[0], atol=1e-6)


def test_bridge_starts_as_identity_and_preserves_shape(tiny_cfg, tiny_params):
    t = prepped(30, 2, seed=8)
    ctx = compressor.compress(t, 5, tiny_params, tiny_cfg, np.random.default_rng(0))
    out = compressor.bridge(ctx, tiny_params)
    assert out.latents.shape == ctx.latents.shape
    np.testing.assert_array_equal(out.latents, ctx.latents)


def test_bridge_gradient_reaches_first_layer(tiny_cfg, tiny_params):
    x = T.Tensor(np.random.default_rng(0).normal(size=(2, 3, tiny_cfg.embed_dim)))
    params = dict(tiny_params)
    params["bridge.w2"] = T.Tensor(np.random.default_rng(1).normal(0, 0.1, params["bridge.w2"].shape), requires_grad=True)
    w1 = params["bridge.w1"]
    fn = lambda: T.sum_(T.tanh(compressor.bridge_tensor(x, params)))  # noqa: E731
    g = T.backward(fn(), [w1])[w1]
    assert np.abs(g).max() > 0
    np.testing.assert_allclose(g, T.numeric_grad(fn, w1, 1e-5), atol=1e-7)


def test_compressed_context_rejects_non_finite():
    with pytest.raises(DataError):
        compressor.CompressedContext(np.full((1, 2, 3), np.nan), 5)
    with pytest.raises(ShapeError):
        compressor.CompressedContext(np.zeros((2, 3)), 5)


# ---------------------------------------------------------------------------
# predictor


@pytest.fixture
def pot(tiny_cfg):
    from taco.train import init_model

    return init_model(tiny_cfg, seed=11, kind="pot")


def logits_np(train, test, params, cfg, c=2):
    P = arrays(params)
    ctx = predictor.np_embed_context(train, P, cfg)
    return predictor.np_predict_logits(ctx, predictor.np_embed_test(test, P, cfg), P, cfg, c)


def test_predictor_mask_pattern():
    m = predictor.predictor_mask(2, 3)
    expect = np.array(
        [
            [1, 1, 0, 0, 0],
            [1, 1, 0, 0, 0],
            [1, 1, 1, 0, 0],
            [1, 1, 0, 1, 0],
            [1, 1, 0, 0, 1],
        ],
        dtype=bool,
    )
    np.testing.assert_array_equal(m, expect)


def test_pot_shapes_and_fast_path(tiny_cfg, pot):
    train, test = prepped(15, 3, seed=1, n_classes=3), prepped(5, 3, seed=2, n_classes=3)
    auto = predictor.predict_from_table(train, test, pot, tiny_cfg)
    assert auto.shape == (5, 3)
    np.testing.assert_allclose(auto.data, logits_np(train, test, pot, tiny_cfg, 3), atol=1e-12)
    p = predictor.softmax_np(auto.data)
    np.testing.assert_allclose(p.sum(1), 1.0)


def test_context_permutation_invariance(tiny_cfg, pot):
    train, test = prepped(20, 3, seed=3), prepped(4, 3, seed=4)
    perm = np.random.default_rng(0).permutation(20)
    shuffled = train.take(perm)
    np.testing.assert_allclose(logits_np(shuffled, test, pot, tiny_cfg), logits_np(train, test, pot, tiny_cfg), atol=1e-6)


def test_test_rows_are_independent(tiny_cfg, pot):
    train, test = prepped(20, 3, seed=3), prepped(4, 3, seed=4)
    base = logits_np(train, test, pot, tiny_cfg)
    other = test.take(np.arange(4))
    other.X[1:] += 3.0
    np.testing.assert_allclose(logits_np(train, other, pot, tiny_cfg)[0], base[0], atol=1e-9)
    dup = test.take(np.array([2, 0, 2]))
    out = logits_np(train, dup, pot, tiny_cfg)
    np.testing.assert_allclose(out[0], out[2], atol=1e-12)
    np.testing.assert_allclose(out[1], base[0], atol=1e-9)


def test_context_labels_matter(tiny_cfg, pot):
    train, test = prepped(20, 3, seed=3), prepped(4, 3, seed=4)
    flipped = train.with_target(1 - train.y)
    assert not np.allclose(logits_np(flipped, test, pot, tiny_cfg), logits_np(train, test, pot, tiny_cfg))


def test_class_count_checked(tiny_cfg, pot):
    train, test = prepped(10, 2), prepped(3, 2)
    with pytest.raises(ValueError):
        logits_np(train, test, pot, tiny_cfg, c=1)
    with pytest.raises(ValueError):
        logits_np(train, test, pot, tiny_cfg, c=tiny_cfg.num_classes_max + 1)


def test_cache_is_exact_and_sized(tiny_cfg, pot):
    train, test = prepped(25, 3, seed=5), prepped(6, 3, seed=6)
    P = arrays(pot)
    ctx = predictor.np_embed_context(train, P, tiny_cfg)
    cache = predictor.build_kv_cache(ctx, P, tiny_cfg)
    cached = predictor.np_predict_with_cache(predictor.np_embed_test(test, P, tiny_cfg), cache, P, tiny_cfg, 2)
    np.testing.assert_array_equal(cached, logits_np(train, test, pot, tiny_cfg))
    assert cache.nbytes == 2 * tiny_cfg.blocks * 25 * 4 * tiny_cfg.embed_dim * 8
    assert cache.n_context_rows == 25 and cache.n_tokens == 100


def test_single_context_row_learns_constant_label():
    """Trained on tasks whose every label is one class, the model predicts that class from one context row."""
    from taco.train import AdamW, init_model

    cfg = ModelConfig(embed_dim=8, blocks=1, heads=2, num_classes_max=3)
    params = init_model(cfg, seed=0, kind="pot")
    opt = AdamW(weight_decay=0.0)
    rng = np.random.default_rng(0)
    names = sorted(params)
    for _ in range(60):
        c = int(rng.integers(3))
        train = prepped(3, 2, n_classes=3, seed=int(rng.integers(1e6))).take([0]).with_target(np.array([c]))
        test = prepped(4, 2, n_classes=3, seed=int(rng.integers(1e6))).with_target(np.full(4, c))
        loss = T.cross_entropy(predictor.predict_from_table(train, test, params, cfg, 3), test.y)
        grads = T.backward(loss, [params[n] for n in names])
        opt.update(params, {n: grads[params[n]] for n in names}, 3e-2)
    for c in range(3):
        train = prepped(3, 2, n_classes=3, seed=100 + c).take([0]).with_target(np.array([c]))
        test = prepped(5, 2, seed=200 + c)
        assert (logits_np(train, test, params, cfg, 3).argmax(1) == c).all()
