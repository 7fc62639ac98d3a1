"""Episodic meta-training of the compressor, bridge and predictor.

Each optimizer step draws fresh synthetic episodes from the prior.  For a
TACO model every episode is compressed to ``K = rate * N_train`` latent rows,
bridged and handed to the predictor, which is scored by cross-entropy on the
episode's test rows.  A POT model (``model_kind: pot``) skips compression and
reads the full labelled training split.

All randomness for step ``s`` comes from generators seeded with
``(seed, s, slot)``, so a run resumed from a step-``s`` checkpoint replays the
exact episode stream, compression rates and dummy draws of an uninterrupted
run.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import checkpoint as ckpt
from . import compressor, predictor
from . import tensor as T
from .compressor import rate_to_k
from .config import ConfigFile
from .data import Table, preprocess
from .errors import CheckpointError, ConfigError, TrainingError
from .prior import PriorConfig, episode_rng, sample_episode
from .tab2d import ModelConfig, Params

log = logging.getLogger(__name__)

MULTI_RATES = (0.01, 0.02, 0.04, 0.08, 0.16)
_RATE_SLOT = 10_000  # rng slot for per-step rate draws, distinct from episode slots


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20_000
    micro_batch: int = 4
    accumulation: int = 1
    lr: float = 1e-4
    warmup: int = 500
    weight_decay: float = 1e-2
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    model_kind: str = "taco"  # taco | pot
    rate_mode: str = "fixed"  # fixed | multi
    rate: float = 0.04
    rates: tuple[float, ...] = MULTI_RATES
    freeze_predictor: bool = False
    checkpoint_every: int = 500
    log_every: int = 1
    seed: int = 0
    prefetch: int = 2
    init_from: str | None = None
    init_compressor_from_predictor: bool = False
    prior: PriorConfig = field(default_factory=lambda: PriorConfig(n_rows=(256, 256), n_features=(2, 20)))
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("must be >= 1", field="steps")
        if self.micro_batch < 1 or self.accumulation < 1:
            raise ConfigError("must be >= 1", field="micro_batch" if self.micro_batch < 1 else "accumulation")
        if not self.clip_norm > 0:
            raise ConfigError("clip norm must be > 0", field="clip_norm")
        if not 0 <= self.warmup < self.steps:
            raise ConfigError(f"warmup {self.warmup} must be < steps {self.steps}", field="warmup")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0", field="lr")
        if self.model_kind not in ("taco", "pot"):
            raise ConfigError("expected 'taco' or 'pot'", field="model_kind")
        if self.rate_mode not in ("fixed", "multi"):
            raise ConfigError("expected 'fixed' or 'multi'", field="rate_mode")
        if not 0 < self.rate <= 1 or not all(0 < r <= 1 for r in self.rates):
            raise ConfigError("rates must lie in (0, 1]", field="rate")
        if self.model_kind == "pot" and self.freeze_predictor:
            raise ConfigError("a predictor-only run cannot freeze its only module", field="freeze_predictor")

    @classmethod
    def from_dict(cls, d: Mapping, where: ConfigFile | None = None) -> "TrainConfig":
        def err(msg, key):
            return where.error(msg, key) if where is not None else ConfigError(msg, field=key)

        known = {f.name for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise err("unknown training setting", k)
            if k == "prior":
                if not isinstance(v, Mapping):
                    raise err("expected a mapping", k)
                try:
                    kw[k] = PriorConfig.from_dict(v)
                except ConfigError as e:
                    raise err(str(e).split(" (field")[0], f"prior.{e.field}") from None
                except TypeError as e:
                    raise err(str(e), k) from None
            elif k == "model":
                if not isinstance(v, Mapping):
                    raise err("expected a mapping", k)
                unknown = set(v) - {f.name for f in fields(ModelConfig)}
                if unknown:
                    raise err("unknown model setting", f"model.{sorted(unknown)[0]}")
                try:
                    kw[k] = ModelConfig(**v)
                except ConfigError as e:
                    raise err(str(e).split(" (field")[0], f"model.{e.field}") from None
            else:
                kw[k] = tuple(v) if isinstance(v, list) else v
        try:
            return cls(**kw)
        except ConfigError as e:
            raise err(str(e).split(" (field")[0], e.field) from None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["prior"] = self.prior.to_dict()
        d["model"] = self.model.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to 0 at ``steps``."""
    if not 0 <= step <= config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    if config.warmup > 0 and step < config.warmup:
        return config.lr * step / config.warmup
    span = config.steps - config.warmup
    progress = (step - config.warmup) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Parameters


def init_model(cfg: ModelConfig, seed: int, kind: str = "taco") -> Params:
    rng = np.random.default_rng([seed, 0xC0FFEE])
    params = predictor.init_params(cfg, rng)
    if kind == "taco":
        params.update(compressor.init_params(cfg, rng))
        params.update(compressor.init_bridge(cfg, rng))
    return params


def warm_start(params: Params, source: Mapping[str, np.ndarray], compressor_from_predictor: bool = False) -> list[str]:
    """Copy matching arrays from ``source`` into ``params``; returns the copied names."""
    copied = []
    for name, p in params.items():
        src = source.get(name)
        if src is None and compressor_from_predictor and name.startswith(compressor.PREFIX):
            src = source.get(predictor.PREFIX + name[len(compressor.PREFIX):])
        if src is not None:
            if src.shape != p.data.shape:
                raise CheckpointError(f"warm start: {name} has shape {src.shape}, model expects {p.data.shape}")
            p.data = np.array(src, dtype=p.data.dtype)
            copied.append(name)
    return copied


def trainable_names(params: Mapping, freeze_predictor: bool) -> list[str]:
    return sorted(n for n in params if not (freeze_predictor and n.startswith(predictor.PREFIX)))


# ---------------------------------------------------------------------------
# Episodes and loss


@dataclass
class PreparedEpisode:
    train: Table
    test: Table
    rate: float | None
    dummy: compressor.DummyTable | None
    task_id: str


def step_rate(config: TrainConfig, step: int) -> float:
    if config.rate_mode == "fixed":
        return config.rate
    rng = episode_rng(config.seed, step, _RATE_SLOT)
    return float(config.rates[int(rng.integers(len(config.rates)))])


def prepare_episode(config: TrainConfig, step: int, slot: int) -> PreparedEpisode:
    """Sample, preprocess and (for TACO) pick dummies for one episode of a step."""
    rng = episode_rng(config.seed, step, slot)
    task_id = f"s{config.seed}-t{step}-e{slot}"
    ep = sample_episode(config.prior, rng, task_id)
    train, stats = preprocess(ep.train)
    test, _ = preprocess(ep.test, stats)
    if config.model_kind == "pot":
        return PreparedEpisode(train, test, None, None, task_id)
    rate = step_rate(config, step)
    dummy = compressor.init_dummy(train, rate_to_k(rate, train.n_rows), rng)
    return PreparedEpisode(train, test, rate, dummy, task_id)


def episode_logits(ep: PreparedEpisode, params: Params, cfg: ModelConfig) -> T.Tensor:
    c = ep.train.n_classes
    if ep.dummy is None:
        return predictor.predict_from_table(ep.train, ep.test, params, cfg, c)
    z = compressor.compress_tensor(ep.train, ep.dummy, params, cfg)
    z = compressor.bridge_tensor(z, params)
    return predictor.predict_logits(z, predictor.embed_test(ep.test, params, cfg), params, cfg, c)


def episode_loss(ep: PreparedEpisode, params: Params, cfg: ModelConfig) -> T.Tensor:
    return T.cross_entropy(episode_logits(ep, params, cfg), ep.test.y)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: Params, grads: Mapping[str, np.ndarray], lr: float) -> None:
        """One decoupled-weight-decay Adam update of the named params."""
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0:
                continue
            step = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data * (1 - lr * self.weight_decay) - lr * step

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        return out

    def load_state(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[6:]: np.array(a) for k, a in arrays.items() if k.startswith("opt.m.")}
        self.v = {k[6:]: np.array(a) for k, a in arrays.items() if k.startswith("opt.v.")}


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for _, g in sorted(grads.items())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, float]:
    """Scale in place to ``max_norm``; returns (norm before, norm after)."""
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
        return norm, global_norm(grads)
    return norm, norm


@dataclass
class StepStats:
    step: int
    loss: float
    grad_norm: float
    grad_norm_clipped: float
    lr: float
    rate: float | None
    episodes: int
    wall_s: float

    def record(self) -> dict:
        d = asdict(self)
        d["episodes_per_s"] = self.episodes / self.wall_s if self.wall_s > 0 else None
        return d


def train_step(
    episodes: list[PreparedEpisode],
    params: Params,
    config: TrainConfig,
    opt: AdamW,
    step: int,
    names: list[str] | None = None,
) -> StepStats:
    """Average gradients over ``episodes``, clip, and apply one AdamW update.

    ``step`` is the index of this update (0-based); its learning rate is
    ``lr_schedule(step + 1)`` so the first update is not a no-op when warmup is 0.
    """
    if not episodes:
        raise ValueError("train_step needs at least one episode")
    t0 = time.perf_counter()
    names = names if names is not None else trainable_names(params, config.freeze_predictor)
    frozen = set(params) - set(names)
    for n in frozen:
        params[n].requires_grad = False
    try:
        total = {n: np.zeros_like(params[n].data) for n in names}
        losses = []
        for ep in episodes:
            loss = episode_loss(ep, params, config.model)
            val = float(loss.data)
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at step {step} on episode {ep.task_id}")
            grads = T.backward(loss, [params[n] for n in names])
            for n in names:
                total[n] += grads[params[n]]
            losses.append(val)
    finally:
        for n in frozen:
            params[n].requires_grad = True
    for n in names:
        total[n] /= len(episodes)
    norm, clipped = clip_grads(total, config.clip_norm)
    if not math.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {step} (episodes {[e.task_id for e in episodes]})")
    lr = lr_schedule(min(step + 1, config.steps), config)
    opt.update(params, total, lr)
    rates = {e.rate for e in episodes}
    return StepStats(step, float(np.mean(losses)), norm, clipped, lr, rates.pop() if len(rates) == 1 else None, len(episodes), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Runs


def _episode_stream(config: TrainConfig, start: int, workers: int) -> Iterator[list[PreparedEpisode]]:
    """Episodes for steps ``start..steps-1`` in order, prepared ahead on worker threads."""
    per_step = config.micro_batch * config.accumulation

    def make(s):
        return [prepare_episode(config, s, i) for i in range(per_step)]

    if workers <= 0:
        for s in range(start, config.steps):
            yield make(s)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        nxt = start
        while nxt < config.steps and len(pending) < workers + 1:
            pending.append(pool.submit(make, nxt))
            nxt += 1
        while pending:
            batch = pending.popleft().result()
            if nxt < config.steps:
                pending.append(pool.submit(make, nxt))
                nxt += 1
            yield batch


def checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"step_{step:06d}.ckpt"


def save_training_state(path: Path, params: Params, opt: AdamW, config: TrainConfig, step: int) -> Path:
    arrays = {k: p.data for k, p in params.items()}
    arrays.update(opt.state_arrays())
    meta = {
        "kind": "model",
        "model_config": config.model.to_dict(),
        "model_kind": config.model_kind,
        "train_config": config.to_dict(),
        "step": step,
        "opt_t": opt.t,
        "predictor_digest": ckpt.digest(arrays, predictor.PREFIX),
    }
    return ckpt.save(path, arrays, meta)


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list[Path]
    metrics: list[dict]
    params: Params


def run_training(
    config: TrainConfig,
    out_dir: str | Path,
    resume: str | Path | None = None,
    on_step: Callable[[StepStats], None] | None = None,
) -> TrainResult:
    """Train for ``config.steps`` steps, checkpointing and logging NDJSON metrics.

    ``resume`` names a checkpoint written by an earlier run with the same
    config; training continues from its step and the metrics log is
    truncated to that step, so the final log equals an uninterrupted run's.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = init_model(config.model, config.seed, config.model_kind)
    opt = AdamW(config.betas, config.eps, config.weight_decay)
    start = 0
    if resume is not None:
        arrays, meta = ckpt.load(resume)
        if meta.get("train_config", {}).get("seed") != config.seed:
            log.warning("resuming from a checkpoint written with a different seed")
        missing = set(params) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint {resume} lacks {sorted(missing)[:3]}")
        for k, p in params.items():
            p.data = np.array(arrays[k])
        opt.load_state(arrays, meta["opt_t"])
        start = int(meta["step"])
    elif config.init_from:
        arrays, _ = ckpt.load(config.init_from)
        copied = warm_start(params, arrays, config.init_compressor_from_predictor)
        log.info("warm start: %d tensors from %s", len(copied), config.init_from)

    metrics_path = out / "metrics.ndjson"
    metrics: list[dict] = []
    if resume is not None and metrics_path.exists():
        for line in metrics_path.read_text().splitlines():
            rec = json.loads(line)
            if rec["step"] < start:
                metrics.append(rec)
    with open(metrics_path, "w") as f:
        for rec in metrics:
            f.write(json.dumps(rec) + "\n")

    names = trainable_names(params, config.freeze_predictor)
    checkpoints = []
    if start == 0 and resume is None:
        checkpoints.append(save_training_state(checkpoint_path(out, 0), params, opt, config, 0))
    with open(metrics_path, "a") as f:
        for step, episodes in zip(range(start, config.steps), _episode_stream(config, start, config.prefetch)):
            stats = train_step(episodes, params, config, opt, step, names)
            rec = stats.record()
            metrics.append(rec)
            if step % config.log_every == 0 or step == config.steps - 1:
                f.write(json.dumps(rec) + "\n")
                f.flush()
            if on_step is not None:
                on_step(stats)
            done = step + 1
            if done % config.checkpoint_every == 0 or done == config.steps:
                checkpoints.append(save_training_state(checkpoint_path(out, done), params, opt, config, done))
    final = checkpoint_path(out, config.steps)
    return TrainResult(final, checkpoints, metrics, params)
