"""Synthetic classification tasks drawn from random structural causal models.

An episode is produced by

1. drawing a DAG over observed feature nodes, 0-3 hidden confounders and one
   label node,
2. giving every non-root node a random mechanism of its parents (linear,
   a small tanh MLP, or an axis-aligned decision tree) plus Gaussian noise,
3. sampling rows ancestrally, discretising the label node into C classes by
   quantiles and binning a random subset of features into categorical levels,
4. splitting the rows into train and test.

Every random choice comes from the generator passed in, so a (config, seed)
pair fixes the episode exactly.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import CATEGORICAL, NUMERIC, Column, Table, write_csv
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

MECHANISMS = ("linear", "mlp", "tree")


@dataclass(frozen=True)
class PriorConfig:
    n_rows: tuple[int, int] = (128, 128)
    train_fraction: tuple[float, float] = (0.75, 0.75)
    n_features: tuple[int, int] = (2, 100)
    n_latent: tuple[int, int] = (0, 3)
    dag_density: float = 0.3
    mechanism_weights: Mapping[str, float] = field(default_factory=lambda: {"linear": 0.5, "mlp": 0.25, "tree": 0.25})
    noise_scale: tuple[float, float] = (0.05, 0.5)
    n_classes: tuple[int, int] = (2, 10)
    categorical_prob: float = 0.2
    max_levels: int = 8
    mlp_hidden: int = 8
    tree_max_depth: int = 4
    max_retries: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("n_rows", "train_fraction", "n_features", "n_latent", "noise_scale", "n_classes"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"empty range ({lo}, {hi})", field=name)
        if self.n_features[0] < 1:
            raise ConfigError("need at least one feature", field="n_features")
        if self.n_classes[0] < 2:
            raise ConfigError("need at least two classes", field="n_classes")
        if not 0 < self.train_fraction[0] <= self.train_fraction[1] < 1:
            raise ConfigError("train fraction must lie in (0, 1)", field="train_fraction")
        w = dict(self.mechanism_weights)
        if set(w) - set(MECHANISMS):
            raise ConfigError(f"unknown mechanisms {sorted(set(w) - set(MECHANISMS))}", field="mechanism_weights")
        if any(v < 0 for v in w.values()) or abs(sum(w.values()) - 1.0) > 1e-9:
            raise ConfigError("weights must be nonnegative and sum to 1", field="mechanism_weights")
        if not 0 <= self.dag_density <= 1:
            raise ConfigError("density must lie in [0, 1]", field="dag_density")
        if not 2 <= self.max_levels:
            raise ConfigError("need at least 2 levels", field="max_levels")
        if not 1 <= self.tree_max_depth <= 4:
            raise ConfigError("tree depth must be in [1, 4]", field="tree_max_depth")

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown prior settings {sorted(unknown)}", field=sorted(unknown)[0])
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mechanism_weights"] = dict(self.mechanism_weights)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# Graph


@dataclass
class DAG:
    """Nodes ``0..n-1`` listed in ``order`` (a topological order)."""

    n_nodes: int
    edges: list[tuple[int, int]]
    order: list[int]
    feature_nodes: list[int]
    latent_nodes: list[int]
    label_node: int

    def parents(self, node: int) -> list[int]:
        return sorted(i for i, j in self.edges if j == node)

    def is_acyclic(self) -> bool:
        indeg = [0] * self.n_nodes
        out: dict[int, list[int]] = {i: [] for i in range(self.n_nodes)}
        for i, j in self.edges:
            indeg[j] += 1
            out[i].append(j)
        ready = [i for i in range(self.n_nodes) if indeg[i] == 0]
        seen = 0
        while ready:
            i = ready.pop()
            seen += 1
            for j in out[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    ready.append(j)
        return seen == self.n_nodes


def sample_dag(config: PriorConfig, rng: np.random.Generator, n_features: int | None = None) -> DAG:
    """Random DAG over features, hidden nodes and a label with at least one parent."""
    m = int(n_features if n_features is not None else rng.integers(config.n_features[0], config.n_features[1] + 1))
    n_lat = int(rng.integers(config.n_latent[0], config.n_latent[1] + 1))
    n = m + n_lat + 1
    order = [int(i) for i in rng.permutation(n)]
    # the label never comes first, so it can always receive a parent
    pos = int(rng.integers(1, n))
    label = order[pos]
    nodes = [i for i in order if i != label]
    roles = rng.permutation(nodes)
    feature_nodes = sorted(int(i) for i in roles[:m])
    latent_nodes = sorted(int(i) for i in roles[m:])
    rank = {node: r for r, node in enumerate(order)}
    edges = []
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < config.dag_density:
                edges.append((order[a], order[b]))
    if not any(j == label for _, j in edges):
        earlier = [i for i in order[:pos]]
        observed = [i for i in earlier if i in feature_nodes]
        src = int(rng.choice(observed if observed else earlier))
        edges.append((src, label))
    edges.sort(key=lambda e: (rank[e[0]], rank[e[1]]))
    return DAG(n, edges, order, feature_nodes, latent_nodes, label)


# ---------------------------------------------------------------------------
# Mechanisms


@dataclass
class Mechanism:
    kind: str
    params: dict
    noise: float

    def __call__(self, parents: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Noise-free output for ``parents`` (rows x n_parents), then standardised plus noise."""
        out = self.deterministic(parents)
        sd = out.std()
        out = out - out.mean()
        if sd > 1e-12:
            out = out / sd
        return out + rng.normal(0.0, self.noise, size=out.shape)

    def deterministic(self, parents: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "linear":
            return parents @ p["w"] + p["b"]
        if self.kind == "mlp":
            return np.tanh(parents @ p["w1"] + p["b1"]) @ p["w2"]
        if self.kind == "tree":
            return _tree_eval(p["tree"], parents)
        raise ValueError(self.kind)


def _random_tree(depth: int, n_parents: int, rng: np.random.Generator):
    if depth == 0:
        return float(rng.normal())
    return (
        int(rng.integers(n_parents)),
        float(rng.normal(0.0, 0.7)),
        _random_tree(depth - 1, n_parents, rng),
        _random_tree(depth - 1, n_parents, rng),
    )


def _tree_eval(tree, X: np.ndarray) -> np.ndarray:
    if not isinstance(tree, tuple):
        return np.full(X.shape[0], tree)
    feat, thr, left, right = tree
    go_left = X[:, feat] <= thr
    out = np.empty(X.shape[0])
    if go_left.any():
        out[go_left] = _tree_eval(left, X[go_left])
    if (~go_left).any():
        out[~go_left] = _tree_eval(right, X[~go_left])
    return out


def sample_mechanism(kind: str, n_parents: int, config: PriorConfig, rng: np.random.Generator) -> Mechanism:
    noise = float(rng.uniform(*config.noise_scale))
    if kind == "linear":
        params = {"w": rng.normal(0.0, 1.0, n_parents), "b": float(rng.normal())}
    elif kind == "mlp":
        h = config.mlp_hidden
        params = {
            "w1": rng.normal(0.0, 1.5 / np.sqrt(n_parents), (n_parents, h)),
            "b1": rng.normal(0.0, 0.5, h),
            "w2": rng.normal(0.0, 1.0, h),
        }
    elif kind == "tree":
        depth = int(rng.integers(1, config.tree_max_depth + 1))
        params = {"tree": _random_tree(depth, n_parents, rng), "depth": depth}
    else:
        raise ValueError(f"unknown mechanism {kind!r}")
    return Mechanism(kind, params, noise)


def sample_mechanisms(dag: DAG, config: PriorConfig, rng: np.random.Generator) -> dict[int, Mechanism]:
    """A mechanism for every node with parents; root nodes are standard normal."""
    kinds = [k for k in MECHANISMS if config.mechanism_weights.get(k, 0) > 0]
    probs = np.array([config.mechanism_weights[k] for k in kinds])
    mech = {}
    for node in dag.order:
        ps = dag.parents(node)
        if ps:
            kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
            mech[node] = sample_mechanism(kind, len(ps), config, rng)
    return mech


def sample_values(dag: DAG, mech: Mapping[int, Mechanism], n_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling; returns ``n_rows x n_nodes``."""
    V = np.zeros((n_rows, dag.n_nodes))
    for node in dag.order:
        ps = dag.parents(node)
        if not ps:
            V[:, node] = rng.normal(size=n_rows)
        else:
            V[:, node] = mech[node](V[:, ps], rng)
    return V


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class Episode:
    train: Table
    test: Table
    task_id: str
    trace: dict

    @property
    def n_classes(self) -> int:
        return self.train.n_classes


def quantile_bins(values: np.ndarray, n_bins: int) -> np.ndarray:
    """Bin ids 0..n_bins-1 with cut points at the empirical k/n_bins quantiles."""
    cuts = np.quantile(values, np.arange(1, n_bins) / n_bins)
    return np.searchsorted(cuts, values, side="right")


def sample_episode(config: PriorConfig, rng: np.random.Generator, task_id: str = "") -> Episode:
    """Draw one classification task; resamples degenerate draws a bounded number of times."""
    for attempt in range(config.max_retries):
        ep = _try_episode(config, rng, task_id)
        if ep is not None:
            return ep
        log.debug("degenerate episode %s (attempt %d), resampling", task_id, attempt)
    raise DataError(f"episode {task_id}: no non-degenerate draw in {config.max_retries} attempts")


def _try_episode(config: PriorConfig, rng: np.random.Generator, task_id: str) -> Episode | None:
    dag = sample_dag(config, rng)
    mech = sample_mechanisms(dag, config, rng)
    n = int(rng.integers(config.n_rows[0], config.n_rows[1] + 1))
    n_classes = int(rng.integers(config.n_classes[0], config.n_classes[1] + 1))
    V = sample_values(dag, mech, n, rng)
    y = quantile_bins(V[:, dag.label_node], n_classes)
    y = rng.permutation(n_classes)[y]
    X = V[:, dag.feature_nodes].copy()
    columns = []
    for j in range(X.shape[1]):
        if rng.random() < config.categorical_prob:
            levels = int(rng.integers(2, config.max_levels + 1))
            X[:, j] = rng.permutation(levels)[quantile_bins(X[:, j], levels)]
            columns.append(Column(f"f{j}", CATEGORICAL, tuple(str(i) for i in range(levels))))
        else:
            columns.append(Column(f"f{j}", NUMERIC))
    frac = float(rng.uniform(*config.train_fraction))
    n_train = min(n - 1, max(n_classes, int(round(frac * n))))
    perm = rng.permutation(n)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    if np.unique(y[tr]).size < n_classes:
        return None
    classes = tuple(str(i) for i in range(n_classes))
    train = Table(X[tr], y[tr], columns, classes=classes)
    test = Table(X[te], y[te], columns, classes=classes)
    trace = {
        "edges": [list(e) for e in dag.edges],
        "mechanisms": {str(k): m.kind for k, m in mech.items()},
        "label_node": dag.label_node,
        "feature_nodes": dag.feature_nodes,
        "latent_nodes": dag.latent_nodes,
        "train_index": tr.tolist(),
        "test_index": te.tolist(),
    }
    return Episode(train, test, task_id, trace)


def episode_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, keys...) position, e.g. (seed, step, slot)."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


def export_episode(ep: Episode, directory: str | Path) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    a, b = d / f"{ep.task_id or 'episode'}_train.csv", d / f"{ep.task_id or 'episode'}_test.csv"
    write_csv(ep.train, a)
    write_csv(ep.test, b)
    return a, b


def sample_sized_episode(config: PriorConfig, n_train: int, n_test: int, n_features: int, rng: np.random.Generator, task_id: str = "") -> Episode:
    """An episode with exactly ``n_train`` / ``n_test`` rows and ``n_features`` features."""
    n = n_train + n_test
    sized = replace(
        config,
        n_rows=(n, n),
        n_features=(n_features, n_features),
        train_fraction=(n_train / n, n_train / n),
    )
    return sample_episode(sized, rng, task_id)
