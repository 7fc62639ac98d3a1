from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from taco import checkpoint as ckpt
from taco import compressor, predictor, tab2d
from taco import config as cfgfile
from taco.data import preprocess
from taco.errors import CheckpointError, ConfigError

from conftest import make_table

dtypes = st.sampled_from([np.float64, np.float32, np.int64, np.int32, np.uint8])


@given(st.dictionaries(st.text("abcdef.", min_size=1, max_size=6), dtypes, min_size=1, max_size=4), st.data())
def test_round_trip_is_bit_exact(names, data):
    src = {n: data.draw(arrays(dt, array_shapes(min_dims=0, max_dims=3, max_side=4))) for n, dt in names.items()}
    back, meta = ckpt.loads(ckpt.dumps(src, {"x": [1, 2]}))
    assert meta == {"x": [1, 2]} and set(back) == set(src)
    for n in src:
        assert back[n].dtype == src[n].dtype and back[n].tobytes() == src[n].tobytes()


def test_big_endian_input_is_stored_little_endian():
    a = np.arange(4, dtype=">f8")
    back, _ = ckpt.loads(ckpt.dumps({"a": a}))
    np.testing.assert_array_equal(back["a"], a)
    assert back["a"].dtype.byteorder in "=<"


def test_header_layout():
    blob = ckpt.dumps({"w": np.ones(3)})
    magic, version, hlen = struct.unpack_from("<8sIQ", blob)
    assert magic == b"TACOCKPT" and version == ckpt.VERSION
    assert len(blob) == 20 + hlen + 24


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b[:-5],  # truncated payload
        lambda b: b[:12],  # truncated prefix
        lambda b: b"NOTACKPT" + b[8:],
        lambda b: b[:-1] + bytes([b[-1] ^ 1]),  # flipped payload bit
        lambda b: b[:8] + struct.pack("<I", 99) + b[12:],  # future version
    ],
    ids=["truncated", "short", "magic", "bitflip", "version"],
)
def test_corruption_is_detected(mutate):
    blob = ckpt.dumps({"w": np.arange(6.0)})
    with pytest.raises(CheckpointError):
        ckpt.loads(mutate(blob))


def test_save_is_atomic_and_missing_file_errors(tmp_path):
    p = ckpt.save(tmp_path / "sub" / "a.ckpt", {"w": np.ones(2)})
    assert p.exists() and not list(tmp_path.glob("sub/*.tmp"))
    with pytest.raises(CheckpointError):
        ckpt.load(tmp_path / "nope.ckpt")


def test_model_round_trip(tmp_path, tiny_cfg, tiny_params):
    p = ckpt.save_model(tmp_path / "m.ckpt", tiny_params, tiny_cfg, {"note": "x"})
    params, cfg, meta = ckpt.load_model(p)
    assert cfg == tiny_cfg and meta["note"] == "x"
    assert set(params) == set(tiny_params)
    for k in params:
        assert params[k].data.tobytes() == tiny_params[k].data.tobytes()
    ckpt.save(tmp_path / "raw.ckpt", {"w": np.ones(1)})
    with pytest.raises(CheckpointError):
        ckpt.load_model(tmp_path / "raw.ckpt")


def test_context_and_cache_round_trip(tmp_path, tiny_cfg, tiny_params):
    t, _ = preprocess(make_table(30, 3, seed=2))
    ctx = compressor.compress(t, 4, tiny_params, tiny_cfg, np.random.default_rng(0), version="v1")
    back = ckpt.load_context(ckpt.save_context(tmp_path / "c.ctx", ctx))
    assert back.latents.tobytes() == ctx.latents.tobytes()
    assert (back.n_source_rows, back.source_fingerprint, back.compressor_version, back.schema) == (
        ctx.n_source_rows,
        ctx.source_fingerprint,
        "v1",
        ctx.schema,
    )
    P = tab2d.param_arrays(tiny_params)
    cache = predictor.build_kv_cache(ctx.latents, P, tiny_cfg)
    cb = ckpt.load_kv_cache(ckpt.save_kv_cache(tmp_path / "k.kv", cache))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(cb.keys + cb.values, cache.keys + cache.values))
    with pytest.raises(CheckpointError):
        ckpt.load_context(tmp_path / "k.kv")


def test_digest_filters_by_prefix():
    a = {"p.x": np.ones(2), "q.y": np.zeros(2)}
    b = {"p.x": np.ones(2), "q.y": np.ones(2)}
    assert ckpt.digest(a, "p.") == ckpt.digest(b, "p.")
    assert ckpt.digest(a) != ckpt.digest(b)


# ---------------------------------------------------------------------------
# config files


def test_config_lines_and_errors(tmp_path):
    cf = cfgfile.parse("a: 1\nb:\n  c: 2\n  d: [1, 2]\n")
    assert cf["b"]["d"] == [1, 2]
    assert cf.line_of("b.c") == 3 and cf.line_of("b.d") == 4
    err = cf.error("bad", "b.d")
    assert err.line == 4 and err.field == "b.d"
    with pytest.raises(ConfigError) as e:
        cfgfile.parse("a: [1,\n")
    assert e.value.line is not None
    with pytest.raises(ConfigError):
        cfgfile.parse("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        cfgfile.load(tmp_path / "missing.yaml")


def test_set_dotted():
    d = {"a": {"b": 1}}
    cfgfile.set_dotted(d, "a.c.d", 5)
    cfgfile.set_dotted(d, "a.b", 2)
    assert d == {"a": {"b": 2, "c": {"d": 5}}}
