"""Held-out evaluation, grid benchmarks and report emission."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from . import infer
from .errors import CapacityError
from .infer import FitOptions, Model
from .metrics import roc_auc
from .prior import Episode, PriorConfig, episode_rng, sample_episode, sample_sized_episode

HEADER = ("mode", "N", "M", "K", "cached", "phase", "wall_ms_mean", "wall_ms_std", "peak_bytes", "oom", "auc")


# ---------------------------------------------------------------------------
# Held-out evaluation


def eval_episodes(prior: PriorConfig, n: int, seed: int) -> list[Episode]:
    """``n`` held-out episodes whose test split holds at least two classes.

    Draws that fail the condition are skipped deterministically, so the list
    depends only on ``(prior, n, seed)``.
    """
    out, i = [], 0
    while len(out) < n:
        ep = sample_episode(prior, episode_rng(seed, 1_000_000 + i), f"eval{seed}-{i}")
        i += 1
        if np.unique(ep.test.y).size >= 2:
            out.append(ep)
    return out


def episode_auc(model: Model, ep: Episode, options: FitOptions) -> float:
    state = infer.fit(ep.train, model, options)
    proba, _ = infer.predict(state, ep.test, model)
    return roc_auc(proba, ep.test.y)


def evaluate(model: Model, episodes: Sequence[Episode], **options) -> np.ndarray:
    """Per-episode ROC-AUC under one fit configuration (whole test split as one batch)."""
    opts = FitOptions(track_memory=False, **options)
    return np.array([episode_auc(model, ep, opts) for ep in episodes])


def sign_test(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, float]:
    """One-sided paired sign test of ``a > b``; ties are dropped.

    Returns ``(wins, losses, p_value)``.
    """
    d = np.asarray(a) - np.asarray(b)
    wins, losses = int((d > 0).sum()), int((d < 0).sum())
    if wins + losses == 0:
        return 0, 0, 1.0
    return wins, losses, float(binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue)


def bootstrap_ci(x: Sequence[float], n_boot: int = 10_000, alpha: float = 0.05, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    return float(np.quantile(means, alpha / 2)), float(np.quantile(means, 1 - alpha / 2))


# ---------------------------------------------------------------------------
# Grid benchmark


@dataclass(frozen=True)
class BenchGrid:
    N: Sequence[int] = (1024, 4096)
    M: Sequence[int] = (16, 64)
    modes: Sequence[str] = ("taco", "pot")
    rates: Sequence[float] = (0.04,)
    repetitions: int = 1
    n_batches: int = 10
    batch_size: int = 50
    cached: bool = False
    phases: Sequence[str] = ("fit", "first_predict", "subsequent_predict")
    memory_limit: int | None = None
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "M", "modes", "rates", "phases"):
            if not len(getattr(self, name)):
                raise ValueError(f"grid axis {name!r} is empty")
        if self.repetitions < 1 or self.n_batches < 1 or self.batch_size < 1:
            raise ValueError("repetitions, n_batches and batch_size must be >= 1")

    def cells(self) -> list[tuple[int, int, str, float | None]]:
        out = []
        for n in self.N:
            for m in self.M:
                for mode in self.modes:
                    for r in ([None] if mode == "pot" else self.rates):
                        out.append((int(n), int(m), mode, r))
        return out


@dataclass
class GridResult:
    rows: list[dict]
    traces: dict[str, list[float]] = field(default_factory=dict)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(round(v, 6))
    return str(v)


def _append_row(path: Path, row: Mapping) -> None:
    """One ``write`` per row, flushed and synced, so a kill leaves whole rows only."""
    line = ",".join(_fmt(row[h]) for h in HEADER) + "\n"
    with open(path, "a") as f:
        f.write(line)
        f.flush()
        os.fsync(f.fileno())


def _ensure_header(path: Path) -> None:
    if not path.exists() or path.stat().st_size == 0:
        with open(path, "w") as f:
            f.write(",".join(HEADER) + "\n")


def _cell_rows(grid: BenchGrid, n: int, m: int, mode: str, rate, model: Model, timer=None) -> tuple[list[dict], list[float]]:
    rng = episode_rng(grid.seed, n, m)
    n_test = grid.n_batches * grid.batch_size
    ep = sample_sized_episode(PriorConfig(), n, n_test, m, rng, f"grid-{n}-{m}")
    batches = infer.split_batches(ep.test, grid.n_batches)
    opts = FitOptions(
        mode=mode,
        rate=rate if rate is not None else 1.0,
        kv_cache=grid.cached,
        dtype=grid.dtype,
        track_memory=False,
        seed=grid.seed,
        memory_limit=grid.memory_limit,
    )
    k = n if mode == "pot" else infer.rate_to_k(opts.rate, n)
    base = {"mode": mode, "N": n, "M": m, "K": k, "cached": grid.cached}
    try:
        fit_ms, first_ms, sub_ms, aucs, trace = [], [], [], [], []
        for rep in range(grid.repetitions):
            state = infer.fit(ep.train, model, opts)
            fit_ms.append(state.fit_record.wall_ms)
            probs, recs = infer.stream_predict(state, batches, model) if timer is None else timer(state, batches, model)
            first_ms.append(recs[0].wall_ms)
            sub_ms.extend(r.wall_ms for r in recs[1:])
            if rep == 0:
                trace = [r.wall_ms for r in recs]
                aucs.append(roc_auc(np.concatenate(probs), ep.test.y))
        # memory is probed on a separate, untimed call so tracing never skews the timings
        mstate = infer.fit(ep.train, model, replace(opts, track_memory=True))
        _, mrec = infer.predict(mstate, batches[-1], model)
        peak = mrec.peak_bytes
        oom = False
    except (CapacityError, MemoryError):
        fit_ms, first_ms, sub_ms, aucs, trace, peak, oom = [], [], [], [], [], None, True
    auc = float(np.mean(aucs)) if aucs else None
    per_phase = {"fit": fit_ms, "first_predict": first_ms, "subsequent_predict": sub_ms}
    rows = []
    for phase in grid.phases:
        xs = per_phase[phase]
        rows.append({
            **base,
            "phase": phase,
            "wall_ms_mean": float(np.mean(xs)) if xs else None,
            "wall_ms_std": float(np.std(xs)) if xs else None,
            "peak_bytes": peak,
            "oom": oom,
            "auc": auc,
        })
    return rows, trace


def run_grid(grid: BenchGrid, model: Model, out_csv: str | Path | None = None, timer=None) -> GridResult:
    """Benchmark every cell; rows are appended to ``out_csv`` as soon as they exist.

    Out-of-memory cells (a :class:`CapacityError` or ``MemoryError``) are
    recorded with ``oom=1`` and the sweep continues.  ``timer`` may replace
    :func:`taco.infer.stream_predict` (tests use it to inject delays).
    """
    path = Path(out_csv) if out_csv is not None else None
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        _ensure_header(path)
    result = GridResult([])
    for n, m, mode, rate in grid.cells():
        rows, trace = _cell_rows(grid, n, m, mode, rate, model, timer)
        for row in rows:
            if path is not None:
                _append_row(path, row)
            result.rows.append(row)
        if trace:
            result.traces[f"{mode} N={n} M={m} K={rows[0]['K']}"] = trace
    return result


def read_rows(path: str | Path) -> list[dict]:
    """Parse a results CSV; a torn trailing line (no newline) is ignored."""
    text = Path(path).read_text()
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append(_parse_row(rec))
    return out


def _parse_row(rec: Mapping[str, str]) -> dict:
    def num(s, kind):
        return None if s in ("", None) else kind(s)

    return {
        "mode": rec["mode"],
        "N": int(rec["N"]),
        "M": int(rec["M"]),
        "K": int(rec["K"]),
        "cached": rec["cached"] in ("1", "True", "true"),
        "phase": rec["phase"],
        "wall_ms_mean": num(rec["wall_ms_mean"], float),
        "wall_ms_std": num(rec["wall_ms_std"], float),
        "peak_bytes": num(rec["peak_bytes"], int),
        "oom": rec["oom"] in ("1", "True", "true"),
        "auc": num(rec["auc"], float),
    }


# ---------------------------------------------------------------------------
# Reports


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    lines = [",".join(HEADER)]
    lines += [",".join(_fmt(r[h]) for h in HEADER) for r in rows]
    return "\n".join(lines) + "\n"


def rows_to_json(rows: Sequence[Mapping]) -> str:
    clean = [{h: (round(r[h], 6) if isinstance(r[h], float) else r[h]) for h in HEADER} for r in rows]
    return json.dumps(clean, indent=1, sort_keys=True) + "\n"


def rows_from_json(text: str) -> list[dict]:
    return [dict(r) for r in json.loads(text)]


def _color(t: float) -> str:
    """Map ``t`` in [0, 1] to a blue-to-red ramp."""
    t = min(1.0, max(0.0, t))
    r = int(round(40 + 200 * t))
    g = int(round(90 + 60 * (1 - abs(2 * t - 1))))
    b = int(round(230 - 190 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_heatmap(rows: Sequence[Mapping], phase: str = "subsequent_predict") -> str:
    """One panel per (mode, K-rate) series; cells colored by log10 wall time, OOM hatched."""
    sel = [r for r in rows if r["phase"] == phase]
    Ns = sorted({r["N"] for r in sel})
    Ms = sorted({r["M"] for r in sel})
    panels = sorted({(r["mode"], bool(r["cached"])) for r in sel})
    times = [math.log10(r["wall_ms_mean"]) for r in sel if r["wall_ms_mean"] and not r["oom"]]
    lo, hi = (min(times), max(times)) if times else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    cw, ch, pad = 70, 40, 60
    pw = pad + cw * len(Ms) + 20
    width, height = pw * len(panels) + 20, pad + ch * len(Ns) + 50
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        '<defs><pattern id="oom" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">'
        '<rect width="6" height="6" fill="#222"/><line x1="0" y1="0" x2="0" y2="6" stroke="#888" stroke-width="2"/></pattern></defs>',
    ]
    for p, (mode, cached) in enumerate(panels):
        x0 = 20 + p * pw
        out.append(f'<text x="{x0 + pad}" y="20">{mode}{" (cached)" if cached else ""}: {phase} ms</text>')
        for j, m in enumerate(Ms):
            out.append(f'<text x="{x0 + pad + j * cw + cw / 2}" y="{pad - 8}" text-anchor="middle">M={m}</text>')
        for i, n in enumerate(Ns):
            out.append(f'<text x="{x0 + pad - 6}" y="{pad + i * ch + ch / 2 + 4}" text-anchor="end">N={n}</text>')
            for j, m in enumerate(Ms):
                cell = [r for r in sel if r["mode"] == mode and bool(r["cached"]) == cached and r["N"] == n and r["M"] == m]
                x, y = x0 + pad + j * cw, pad + i * ch
                if not cell:
                    continue
                r = cell[0]
                if r["oom"] or r["wall_ms_mean"] is None:
                    out.append(f'<rect class="oom" x="{x}" y="{y}" width="{cw}" height="{ch}" fill="url(#oom)" stroke="#fff"/>')
                    out.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle" fill="#fff">OOM</text>')
                else:
                    t = (math.log10(r["wall_ms_mean"]) - lo) / span
                    out.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{_color(t)}" stroke="#fff"/>')
                    out.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4}" text-anchor="middle">{r["wall_ms_mean"]:.1f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cumulative(trace: Sequence[float]) -> list[float]:
    return [float(v) for v in np.cumsum(np.asarray(trace, dtype=np.float64))]


def svg_lines(traces: Mapping[str, Sequence[float]]) -> str:
    """Cumulative predict time against batch index, one polyline per series."""
    series = {k: cumulative(v) for k, v in sorted(traces.items())}
    ymax = max((s[-1] for s in series.values() if s), default=1.0) or 1.0
    xmax = max((len(s) for s in series.values()), default=1)
    W, H, pad = 640, 360, 50
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">',
        f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="#000"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="#000"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle">batch</text>',
        f'<text x="14" y="{H / 2}" transform="rotate(-90 14 {H / 2})" text-anchor="middle">cumulative predict ms</text>',
    ]
    for idx, (name, ys) in enumerate(series.items()):
        col = palette[idx % len(palette)]
        pts = " ".join(
            f"{pad + (W - 2 * pad) * (i + 1) / xmax:.2f},{H - pad - (H - 2 * pad) * y / ymax:.2f}" for i, y in enumerate(ys)
        )
        out.append(f'<polyline class="series" data-name="{name}" fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{W - pad - 4}" y="{pad + 14 * idx}" text-anchor="end" fill="{col}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


FORMATS = ("csv", "json", "svg-heatmap", "svg-lines")


def emit_report(rows: Sequence[Mapping], fmt: str, path: str | Path, traces: Mapping[str, Sequence[float]] | None = None) -> Path:
    """Write ``rows`` in one format.  Output bytes depend only on the inputs.

    ``svg-lines`` plots ``traces`` (per-batch predict times) when given;
    otherwise each series is rebuilt from its first and mean subsequent times.
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    if not rows and fmt != "svg-lines":
        raise ValueError("no rows to report")
    if fmt == "csv":
        text = rows_to_csv(rows)
    elif fmt == "json":
        text = rows_to_json(rows)
    elif fmt == "svg-heatmap":
        text = svg_heatmap(rows)
    else:
        text = svg_lines(traces if traces is not None else _traces_from_rows(rows))
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    return p


def _traces_from_rows(rows: Sequence[Mapping], n_batches: int = 100) -> dict[str, list[float]]:
    out = {}
    keyed: dict[tuple, dict] = {}
    for r in rows:
        keyed.setdefault((r["mode"], r["N"], r["M"], r["K"]), {})[r["phase"]] = r
    for (mode, n, m, k), ph in sorted(keyed.items()):
        sub = ph.get("subsequent_predict")
        if not sub or sub["wall_ms_mean"] is None:
            continue
        first = ph.get("first_predict", sub)["wall_ms_mean"] or sub["wall_ms_mean"]
        out[f"{mode} N={n} M={m} K={k}"] = [first] + [sub["wall_ms_mean"]] * (n_batches - 1)
    return out
