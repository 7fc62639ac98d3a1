"""Command-line entry point: ``taco train | fit-predict | bench``.

Exit codes: 0 success, 3 invalid configuration, 4 bad input data,
5 capacity (out-of-memory) error, 6 unreadable checkpoint, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import bench, config, infer
from . import checkpoint as ckpt
from .data import load_csv
from .errors import CapacityError, CheckpointError, ConfigError, DataError
from .metrics import roc_auc
from .prior import PriorConfig, episode_rng, sample_sized_episode
from .train import TrainConfig, run_training

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CAPACITY, EXIT_CHECKPOINT = 0, 1, 3, 4, 5, 6

log = logging.getLogger("taco")


def _parse_value(text: str):
    return yaml.safe_load(text)


def _overrides(pairs) -> list[tuple[str, object]]:
    out = []
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE", field=item)
        k, v = item.split("=", 1)
        out.append((k.strip(), _parse_value(v)))
    return out


def load_train_config(path: str | None, args) -> TrainConfig:
    """File values first, then ``--set`` overrides, then dedicated flags."""
    if path:
        cf = config.load(path)
        if "prior" not in cf:
            raise ConfigError(f"{path}: training config needs a 'prior' section", field="prior")
    else:
        cf = config.ConfigFile({}, {})
    data = dict(cf)
    for k, v in _overrides(args.set):
        config.set_dotted(data, k, v)
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("rate", "rate"), ("lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            data[key] = v
    if args.freeze_predictor:
        data["freeze_predictor"] = True
    if args.multi_rate:
        data["rate_mode"] = "multi"
    if args.init_from:
        data["init_from"] = args.init_from
    steps = data.get("steps", TrainConfig.steps)
    if "warmup" not in data and steps <= TrainConfig.warmup:
        data["warmup"] = max(0, steps // 10)
    return TrainConfig.from_dict(data, cf)


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, args)
    out = Path(args.out)

    def show(s):
        if s.step % args.print_every == 0 or s.step == cfg.steps - 1:
            print(f"step {s.step:6d}  loss {s.loss:.4f}  grad {s.grad_norm:.3f}  lr {s.lr:.2e}", flush=True)

    res = run_training(cfg, out, resume=args.resume, on_step=show)
    print(f"final checkpoint {res.final_checkpoint}  sha256 {ckpt.file_digest(res.final_checkpoint)}")
    return EXIT_OK


def _load_model(path: str, dtype: str) -> infer.Model:
    params, cfg, meta = ckpt.load_model(path)
    return infer.Model.from_params(params, cfg, dtype, version=Path(path).name)


def _synthetic(spec: str, seed: int):
    try:
        n, m, t = (int(x) for x in spec.split(","))
    except ValueError:
        raise ConfigError(f"--synthetic expects N,M,T, got {spec!r}", field="synthetic") from None
    ep = sample_sized_episode(PriorConfig(), n, t, m, episode_rng(seed, n, m), "synthetic")
    return ep.train, ep.test


def cmd_fit_predict(args) -> int:
    model = _load_model(args.checkpoint, args.dtype)
    if args.synthetic:
        train, test = _synthetic(args.synthetic, args.seed)
    else:
        if not (args.train and args.test):
            raise ConfigError("need --train and --test CSVs (or --synthetic)", field="train")
        train = load_csv(args.train, target=args.target)
        test = load_csv(args.test, target=args.target, kinds={c.name: c.kind for c in train.columns}, classes=train.classes)
    if test.schema() != train.schema():
        raise DataError(f"train/test schema mismatch: {train.schema()} vs {test.schema()}")
    opts = infer.FitOptions(
        mode=args.mode,
        rate=args.rate,
        kv_cache=args.kv_cache,
        chunking=args.chunk,
        chunk_size=args.chunk_size,
        dtype=args.dtype,
        seed=args.seed,
        memory_limit=args.memory_limit,
        track_memory=args.track_memory,
    )
    state = infer.fit(train, model, opts)
    print(f"mode {state.mode}  N {state.n_train}  K {state.k}  fit {state.fit_record.wall_ms:.1f} ms", flush=True)
    batches = infer.split_batches(test, min(args.batches, test.n_rows))
    # a warm-up call on the first batch is recorded as first_predict; every
    # batch is then timed as a subsequent predict
    _, first = infer.predict(state, batches[0], model, "first_predict")
    probs, recs = [], [first]
    for b in batches:
        p, r = infer.predict(state, b, model)
        probs.append(p)
        recs.append(r)
    proba = np.concatenate(probs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w") as f:
        f.write(",".join(f"p_{c}" for c in (train.classes or range(state.n_classes))) + "\n")
        for row in proba:
            f.write(",".join(f"{p:.9g}" for p in row) + "\n")
    timing = out / "timing.ndjson"
    timing.write_text("")
    infer.write_records([state.fit_record, *recs], timing)
    summary = {"mode": state.mode, "N": state.n_train, "M": state.n_features, "K": state.k, "cached": args.kv_cache}
    if test.y is not None and (test.y >= 0).all() and np.unique(test.y).size >= 2:
        summary["auc"] = roc_auc(proba, test.y)
        print(f"ROC-AUC {summary['auc']:.4f}")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def _grid_from_args(args) -> bench.BenchGrid:
    data = {}
    if args.config:
        cf = config.load(args.config)
        data = dict(cf.get("grid", cf))
    for k, v in _overrides(args.set):
        data[k] = v
    if args.memory_limit is not None:
        data["memory_limit"] = args.memory_limit
    data["seed"] = args.seed
    known = set(bench.BenchGrid.__dataclass_fields__)
    bad = set(data) - known
    if bad:
        raise ConfigError("unknown grid setting", field=sorted(bad)[0])
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return bench.BenchGrid(**data)
    except ValueError as e:
        raise ConfigError(str(e), field="grid") from None


def cmd_bench(args) -> int:
    model = _load_model(args.checkpoint, "float32")
    grid = _grid_from_args(args)
    grid = replace(grid, dtype=args.dtype)
    out = Path(args.out)
    res = bench.run_grid(grid, model, out / "results.csv")
    for fmt, name in (("json", "results.json"), ("svg-heatmap", "heatmap.svg"), ("svg-lines", "streaming.svg")):
        bench.emit_report(res.rows, fmt, out / name, traces=res.traces)
    n_oom = sum(1 for r in res.rows if r["oom"])
    print(f"{len(res.rows)} rows, {n_oom} out-of-memory -> {out}")
    if n_oom and args.strict:
        return EXIT_CAPACITY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taco", description="Compressed in-context learning for tabular classification.")
    p.add_argument("--log-level", default="WARNING", help="Python logging level")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train on synthetic episodes drawn from the SCM prior")
    t.add_argument("--config", help="YAML training config (top-level training keys plus 'prior' and 'model' sections)")
    t.add_argument("--out", default="runs/train", help="directory for checkpoints and metrics.ndjson")
    t.add_argument("--steps", type=int, help="optimizer steps (overrides the config)")
    t.add_argument("--seed", type=int, help="seed for initialisation and the episode stream (default 0)")
    t.add_argument("--lr", type=float, help="peak learning rate reached after warmup")
    t.add_argument("--rate", type=float, help="fixed compression rate K/N for TACO training")
    t.add_argument("--multi-rate", action="store_true", help="sample the rate per step from {1,2,4,8,16}%%")
    t.add_argument("--freeze-predictor", action="store_true", help="train only the compressor and bridge; predictor weights stay fixed")
    t.add_argument("--init-from", help="checkpoint to warm-start matching weights from")
    t.add_argument("--resume", help="continue from a checkpoint written by this run")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. prior.n_rows=[64,64]")
    t.add_argument("--print-every", type=int, default=50, help="print a loss line every N steps")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-predict", help="fit a context on a training table and predict a test table in batches")
    f.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    f.add_argument("--train", help="training CSV with a header row")
    f.add_argument("--test", help="test CSV with the same columns")
    f.add_argument("--target", default="target", help="name of the label column")
    f.add_argument("--synthetic", metavar="N,M,T", help="use a synthetic episode with N train rows, M features, T test rows")
    f.add_argument("--mode", choices=infer.MODES, default="taco", help="taco: compressed context; pot: full context; random/knn: subsampled context")
    f.add_argument("--rate", type=float, default=0.04, help="compression rate r = K/N (taco, random, knn)")
    f.add_argument("--kv-cache", action="store_true", help="materialise the predictor's context keys/values at fit time")
    f.add_argument("--chunk", action="store_true", help="compress in chunks and stitch the summaries")
    f.add_argument("--chunk-size", type=int, help="chunk size (default: the size policy on N)")
    f.add_argument("--batches", type=int, default=1, help="split the test set into this many sequential predict calls")
    f.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="inference precision")
    f.add_argument("--memory-limit", type=int, help="refuse contexts whose working set exceeds this many bytes")
    f.add_argument("--track-memory", action="store_true", help="record traced peak bytes in timing records")
    f.add_argument("--seed", type=int, default=0, help="seed for dummy rows, subsampling and synthetic data")
    f.add_argument("--out", default="runs/predict", help="output directory")
    f.set_defaults(func=cmd_fit_predict)

    b = sub.add_parser("bench", help="time fit/predict over an (N, M) grid and write reports")
    b.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    b.add_argument("--config", help="YAML grid config (keys of BenchGrid, optionally under 'grid')")
    b.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a grid value, e.g. N=[256,512]")
    b.add_argument("--memory-limit", type=int, help="artificial capacity cap in bytes; larger cells are reported as OOM")
    b.add_argument("--strict", action="store_true", help="exit nonzero if any cell ran out of memory")
    b.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="inference precision")
    b.add_argument("--seed", type=int, default=0, help="seed for synthetic grid data and dummy rows")
    b.add_argument("--out", default="runs/bench", help="output directory")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CapacityError as e:
        print(f"capacity error: {e}", file=sys.stderr)
        return EXIT_CAPACITY
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
