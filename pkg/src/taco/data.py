"""Tables, CSV ingestion and the preprocessing applied before embedding."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError

NUMERIC = "numeric"
CATEGORICAL = "categorical"

# Reserved label ids.  Real class labels are 0..C-1.
MISSING_TARGET = -1  # test rows whose label the predictor must infer
MASK_PLACEHOLDER = -2  # compressor dummy rows

# Reserved category id for values not seen when the preprocessing stats were fit.
UNSEEN_CATEGORY = -1


@dataclass(frozen=True)
class Column:
    name: str
    kind: str = NUMERIC
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class Table:
    """N rows of M feature cells plus an optional integer target column.

    ``X`` is float; categorical columns hold integer codes into
    ``Column.categories`` (after preprocessing: ordinal ids, ``UNSEEN_CATEGORY``
    for values missing from the fitted map).  NaN marks a missing numeric cell.
    """

    X: np.ndarray
    y: np.ndarray | None
    columns: list[Column]
    target: str = "target"
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {self.X.shape}")
        if self.X.shape[1] != len(self.columns):
            raise DataError(f"{self.X.shape[1]} feature columns but {len(self.columns)} column specs")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.X.shape[0],):
                raise DataError(f"target length {self.y.shape} does not match {self.X.shape[0]} rows")
            labels = self.y[self.y >= 0]
            if self.classes and labels.size and labels.max() >= len(self.classes):
                raise DataError("label id outside the class list")

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        if self.classes:
            return len(self.classes)
        if self.y is None or not (self.y >= 0).any():
            return 0
        return int(self.y[self.y >= 0].max()) + 1

    @property
    def is_categorical(self) -> np.ndarray:
        return np.array([c.kind == CATEGORICAL for c in self.columns], dtype=bool)

    def take(self, idx) -> "Table":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], y=None if self.y is None else self.y[idx])

    def with_target(self, y) -> "Table":
        return replace(self, y=y)

    def schema(self) -> tuple:
        return tuple((c.name, c.kind) for c in self.columns)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.schema()).encode())
        h.update(np.ascontiguousarray(self.X).tobytes())
        if self.y is not None:
            h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Table):
            return NotImplemented
        same_y = (self.y is None and other.y is None) or (
            self.y is not None and other.y is not None and np.array_equal(self.y, other.y)
        )
        return (
            self.columns == other.columns
            and self.classes == other.classes
            and self.target == other.target
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X, equal_nan=True)
            and same_y
        )


def concat_tables(tables: Sequence[Table]) -> Table:
    first = tables[0]
    ys = [t.y for t in tables]
    y = None if any(v is None for v in ys) else np.concatenate(ys)
    return replace(first, X=np.concatenate([t.X for t in tables]), y=y)


# ---------------------------------------------------------------------------
# CSV


def _is_float(s: str) -> bool:
    if s == "":
        return True
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(
    path: str | Path,
    target: str | None = "target",
    kinds: Mapping[str, str] | None = None,
    classes: Sequence[str] | None = None,
) -> Table:
    """Read a CSV with a header row.

    Column kinds come from ``kinds`` when given, otherwise numeric if every
    non-empty cell parses as a float.  The target column (if named and present)
    is read as class labels; label names are sorted unless ``classes`` fixes them.
    """
    kinds = dict(kinds or {})
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    for i, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}: line {i} has {len(r)} cells, header has {len(header)}")
    if not body:
        raise DataError(f"{path}: no data rows")
    cols_raw = list(zip(*body))
    y = None
    class_names: tuple[str, ...] = ()
    feat_idx = list(range(len(header)))
    if target is not None and target in header:
        ti = header.index(target)
        feat_idx.remove(ti)
        raw = [s.strip() for s in cols_raw[ti]]
        if any(s == "" for s in raw):
            raise DataError(f"{path}: target column {target!r} has empty cells")
        if classes is None:
            if all(_is_float(s) for s in raw):
                vals = sorted({float(s) for s in raw})
                if any(v != int(v) for v in vals):
                    raise DataError(f"{path}: target column {target!r} is not a class label")
                class_names = tuple(str(int(v)) for v in vals)
                raw = [str(int(float(s))) for s in raw]
            else:
                class_names = tuple(sorted(set(raw)))
        else:
            class_names = tuple(classes)
        lut = {c: i for i, c in enumerate(class_names)}
        try:
            y = np.array([lut[s] for s in raw], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{path}: unknown class label {exc.args[0]!r}") from None
    columns: list[Column] = []
    X = np.empty((len(body), len(feat_idx)))
    for j, ci in enumerate(feat_idx):
        name = header[ci]
        cells = [s.strip() for s in cols_raw[ci]]
        kind = kinds.get(name) or (NUMERIC if all(_is_float(s) for s in cells) else CATEGORICAL)
        if kind == NUMERIC:
            try:
                X[:, j] = [float(s) if s != "" else math.nan for s in cells]
            except ValueError:
                raise DataError(f"{path}: column {name!r} declared numeric has text cells") from None
            columns.append(Column(name, NUMERIC))
        else:
            cats = tuple(sorted({s for s in cells if s != ""}))
            lut = {c: i for i, c in enumerate(cats)}
            X[:, j] = [lut[s] if s != "" else math.nan for s in cells]
            columns.append(Column(name, CATEGORICAL, cats))
    return Table(X, y, columns, target=target or "target", classes=class_names)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(table: Table, path: str | Path) -> None:
    """Write ``table`` so that ``load_csv`` reads back an identical table."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [c.name for c in table.columns]
        if table.y is not None:
            header.append(table.target)
        w.writerow(header)
        for i in range(table.n_rows):
            row = []
            for j, col in enumerate(table.columns):
                v = table.X[i, j]
                if col.kind == CATEGORICAL:
                    row.append("" if math.isnan(v) else col.categories[int(v)])
                else:
                    row.append(_fmt(v))
            if table.y is not None:
                lab = int(table.y[i])
                row.append(table.classes[lab] if table.classes else str(lab))
            w.writerow(row)


# ---------------------------------------------------------------------------
# Preprocessing


@dataclass
class PreprocessStats:
    """Per-column statistics fit on a training table and reused at predict time."""

    schema: tuple
    means: np.ndarray
    scales: np.ndarray
    category_maps: dict[int, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": [list(s) for s in self.schema],
            "means": self.means.tolist(),
            "scales": self.scales.tolist(),
            "category_maps": {str(k): v for k, v in self.category_maps.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PreprocessStats":
        return cls(
            schema=tuple(tuple(s) for s in d["schema"]),
            means=np.asarray(d["means"], dtype=np.float64),
            scales=np.asarray(d["scales"], dtype=np.float64),
            category_maps={int(k): dict(v) for k, v in d["category_maps"].items()},
        )


def fit_stats(table: Table) -> PreprocessStats:
    M = table.n_features
    means = np.zeros(M)
    scales = np.zeros(M)
    cmaps: dict[int, dict[str, int]] = {}
    for j, col in enumerate(table.columns):
        v = table.X[:, j]
        if col.kind == NUMERIC:
            ok = v[~np.isnan(v)]
            if ok.size:
                means[j] = ok.mean()
                scales[j] = ok.std()
        else:
            seen = sorted({int(c) for c in v[~np.isnan(v)] if c >= 0})
            names = col.categories or tuple(str(c) for c in range(max(seen, default=-1) + 1))
            cmaps[j] = {names[c]: i for i, c in enumerate(seen)}
    return PreprocessStats(table.schema(), means, scales, cmaps)


def preprocess(table: Table, stats: PreprocessStats | None = None) -> tuple[Table, PreprocessStats]:
    """Z-score numerics and ordinal-encode categoricals using training statistics.

    Zero-variance columns map to 0 and missing numerics to the training mean
    (hence 0).  Categories absent from the training map become
    ``UNSEEN_CATEGORY``.  Output categorical columns keep their kind and list
    the training categories in id order.
    """
    if stats is None:
        stats = fit_stats(table)
    elif table.schema() != stats.schema:
        raise DataError(f"schema mismatch: table has {table.schema()}, stats were fit on {stats.schema}")
    X = table.X.copy()
    cols: list[Column] = []
    for j, col in enumerate(table.columns):
        v = X[:, j]
        if col.kind == NUMERIC:
            v = np.where(np.isnan(v), stats.means[j], v)
            s = stats.scales[j]
            X[:, j] = (v - stats.means[j]) / s if s > 0 else 0.0
            cols.append(col)
        else:
            cmap = stats.category_maps.get(j, {})
            names = col.categories or tuple(str(c) for c in range(int(np.nanmax(v, initial=-1)) + 1))
            out = np.full(v.shape, float(UNSEEN_CATEGORY))
            for i, c in enumerate(v):
                if not math.isnan(c):
                    code = int(c)
                    if 0 <= code < len(names):
                        out[i] = cmap.get(names[code], UNSEEN_CATEGORY)
            X[:, j] = out
            ordered = tuple(sorted(cmap, key=cmap.get))
            cols.append(Column(col.name, CATEGORICAL, ordered))
    return replace(table, X=X, columns=cols), stats

