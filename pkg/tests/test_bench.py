from __future__ import annotations

import time

import numpy as np
import pytest

from taco import bench, infer
from taco.bench import BenchGrid
from taco.prior import PriorConfig

SMALL = dict(N=(40, 80), M=(2, 3), n_batches=3, batch_size=5, phases=("subsequent_predict",), seed=1, dtype="float64")


def test_grid_cardinality(tiny_model):
    res = bench.run_grid(BenchGrid(**SMALL), tiny_model)
    assert len(res.rows) == 8
    assert {(r["N"], r["M"], r["mode"]) for r in res.rows} == {(n, m, k) for n in (40, 80) for m in (2, 3) for k in ("taco", "pot")}
    assert all(r["auc"] is not None and 0 <= r["auc"] <= 1 for r in res.rows)
    assert {r["K"] for r in res.rows if r["mode"] == "pot"} == {40, 80}


def test_subsequent_mean_excludes_first_call(tiny_model):
    def slow_first(state, batches, model):
        probs, recs = infer.stream_predict(state, batches, model)
        recs[0].wall_ms = 10_000.0
        return probs, recs

    grid = BenchGrid(**{**SMALL, "N": (40,), "M": (2,), "modes": ("taco",), "phases": ("first_predict", "subsequent_predict")})
    rows = bench.run_grid(grid, tiny_model, timer=slow_first).rows
    first, sub = rows
    assert first["wall_ms_mean"] == 10_000.0 and sub["wall_ms_mean"] < 1_000.0


def test_oom_cells_are_flagged_not_fatal(tiny_model):
    # a cap between the working sets of 40-row and 80-row contexts
    limit = infer.working_set_bytes(60, 3, tiny_model.cfg, 8, infer.tab2d.DEFAULT_ATTN_BLOCK_BYTES)
    rows = bench.run_grid(BenchGrid(**{**SMALL, "memory_limit": limit}), tiny_model).rows
    assert {r["N"] for r in rows if r["oom"]} == {80}
    assert all(r["wall_ms_mean"] is None for r in rows if r["oom"])


def test_rows_land_on_disk_incrementally(tmp_path, tiny_model):
    calls = []

    def die_after_three(state, batches, model):
        if len(calls) == 3:
            raise KeyboardInterrupt
        calls.append(1)
        return infer.stream_predict(state, batches, model)

    out = tmp_path / "r.csv"
    with pytest.raises(KeyboardInterrupt):
        bench.run_grid(BenchGrid(**SMALL), tiny_model, out, timer=die_after_three)
    assert len(bench.read_rows(out)) == 3
    with open(out, "a") as f:
        f.write("taco,40,2,2,0,subsequent")  # a torn write
    assert len(bench.read_rows(out)) == 3


def test_same_seed_same_auc(tiny_model):
    a = bench.run_grid(BenchGrid(**SMALL), tiny_model).rows
    b = bench.run_grid(BenchGrid(**SMALL), tiny_model).rows
    assert [r["auc"] for r in a] == [r["auc"] for r in b]


def test_grid_validation():
    with pytest.raises(ValueError):
        BenchGrid(N=())
    with pytest.raises(ValueError):
        BenchGrid(repetitions=0)


ROWS = [
    {"mode": "taco", "N": 1024, "M": 16, "K": 41, "cached": False, "phase": "subsequent_predict", "wall_ms_mean": 1.5, "wall_ms_std": 0.25, "peak_bytes": 1000, "oom": False, "auc": 0.8125},
    {"mode": "pot", "N": 1024, "M": 16, "K": 1024, "cached": False, "phase": "subsequent_predict", "wall_ms_mean": 30.0, "wall_ms_std": 1.0, "peak_bytes": 9000, "oom": False, "auc": 0.875},
    {"mode": "pot", "N": 4096, "M": 16, "K": 4096, "cached": False, "phase": "subsequent_predict", "wall_ms_mean": None, "wall_ms_std": None, "peak_bytes": None, "oom": True, "auc": None},
]


def test_csv_json_round_trip(tmp_path):
    p = bench.emit_report(ROWS, "csv", tmp_path / "r.csv")
    back = bench.read_rows(p)
    assert back == ROWS
    j = bench.emit_report(back, "json", tmp_path / "r.json")
    assert bench.rows_from_json(j.read_text()) == ROWS
    assert bench.rows_to_csv(bench.rows_from_json(j.read_text())) == p.read_text()


def test_reports_are_deterministic(tmp_path):
    for fmt in bench.FORMATS:
        a = bench.emit_report(ROWS, fmt, tmp_path / f"a.{fmt}").read_bytes()
        b = bench.emit_report(ROWS, fmt, tmp_path / f"b.{fmt}").read_bytes()
        assert a == b
    with pytest.raises(ValueError):
        bench.emit_report(ROWS, "png", tmp_path / "x")
    with pytest.raises(ValueError):
        bench.emit_report([], "csv", tmp_path / "x")


def test_heatmap_flags_oom_cells():
    svg = bench.svg_heatmap(ROWS)
    assert svg.startswith("<svg") and svg.count('class="oom"') == 1


def test_cumulative_lines_are_monotone():
    traces = {"taco": [5.0, 1.0, 1.2, 0.9], "pot": [40.0, 30.0, 31.0, 29.0]}
    for t in traces.values():
        c = bench.cumulative(t)
        assert all(b >= a for a, b in zip(c, c[1:])) and c[-1] == pytest.approx(sum(t))
    svg = bench.svg_lines(traces)
    assert svg.count('class="series"') == 2


def test_sign_test_and_bootstrap():
    w, l, p = bench.sign_test([0.9] * 10, [0.5] * 10)
    assert (w, l) == (10, 0) and p == pytest.approx(0.5**10)
    assert bench.sign_test([0.5, 0.6], [0.5, 0.6]) == (0, 0, 1.0)
    x = np.random.default_rng(0).normal(0.7, 0.05, 200)
    lo, hi = bench.bootstrap_ci(x)
    assert lo < x.mean() < hi and hi - lo < 0.02


def test_eval_episodes_are_deterministic_and_two_class():
    prior = PriorConfig(n_rows=(40, 40), n_features=(2, 4), n_classes=(2, 3))
    a = bench.eval_episodes(prior, 10, seed=3)
    b = bench.eval_episodes(prior, 10, seed=3)
    assert all(x.train == y.train for x, y in zip(a, b))
    assert all(np.unique(e.test.y).size >= 2 for e in a)


def test_evaluate_returns_per_episode_auc(tiny_model):
    prior = PriorConfig(n_rows=(40, 40), n_features=(2, 4), n_classes=(2, 2))
    eps = bench.eval_episodes(prior, 4, seed=0)
    t0 = time.perf_counter()
    aucs = bench.evaluate(tiny_model, eps, mode="random", rate=0.25)
    assert aucs.shape == (4,) and ((aucs >= 0) & (aucs <= 1)).all()
    assert time.perf_counter() - t0 < 30
