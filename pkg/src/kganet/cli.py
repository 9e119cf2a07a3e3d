"""Command-line entry point: ``kganet <command> [flags]``.

Commands write their outputs plus a ``manifest.json`` recording the full
configuration, seed, package versions and SHA-256 digests of inputs and
outputs. Manifests contain no timestamps, so identical inputs give
byte-identical manifests.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
``KGANET_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .data import Dataset, SyntheticConfig, generate, load_dataset, save_dataset
from .errors import ConfigError, ContractError, DataError, DivergenceError, UndefinedMetricError
from .evaluation import (
    attention_distance_correlation,
    evaluate,
    keyframe_attention_gap,
    write_attention_csv,
)
from .training import ABLATIONS, TrainConfig, load_trained, train

logger = logging.getLogger("kganet")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4
OUT_ENV = "KGANET_OUT"
TRAIN_FILE, TEST_FILE = "train.kgad", "test.kgad"

# row order and labels of the ablation summary table
SUITE_ROWS = (
    ("no_image_guidance", "w/o image guidance"),
    ("no_coherence_no_attention", "w/o coherence loss & attention"),
    ("no_coherence", "w/o coherence loss"),
    ("full", "full"),
)


# ---------------------------------------------------------------------------
# config files: one ``key = value`` per line, ``#`` starts a comment


def _coerce(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str, cls):
    """Build a ``cls`` dataclass from key=value text; unknown keys are rejected."""
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, getattr(defaults, key))
    return cls(**values)


def read_config(path: Optional[str], cls):
    if path is None:
        return cls()
    try:
        with open(path) as fh:
            return parse_config_text(fh.read(), cls)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


# ---------------------------------------------------------------------------
# manifests


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> Dict[str, str]:
    return {
        "kganet": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(out_dir: str, command: str, config: dict, seed: int, inputs=(), outputs=()) -> str:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "versions": versions(),
        "inputs": {os.path.basename(p): _sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _default_out(sub: str) -> str:
    return os.path.join(os.environ.get(OUT_ENV, "runs"), sub)


def _load_splits(data_dir: str):
    paths = [os.path.join(data_dir, TRAIN_FILE), os.path.join(data_dir, TEST_FILE)]
    for p in paths:
        if not os.path.exists(p):
            raise DataError(f"missing dataset file {p}")
    return load_dataset(paths[0]), load_dataset(paths[1]), paths


def _write_text(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    config = read_config(args.config, SyntheticConfig)
    if args.seed is not None:
        config.seed = args.seed
    train_split, test_split = generate(config)
    os.makedirs(args.out, exist_ok=True)
    outputs = [os.path.join(args.out, TRAIN_FILE), os.path.join(args.out, TEST_FILE)]
    save_dataset(outputs[0], train_split)
    save_dataset(outputs[1], test_split)
    write_manifest(args.out, "gen-data", asdict(config), config.seed, outputs=outputs)
    print(f"wrote {len(train_split.videos)} train videos, {len(train_split.images)} images, "
          f"{len(test_split.videos)} test videos to {args.out}")
    return 0


def build_train_config(args) -> TrainConfig:
    if args.manifest:
        with open(args.manifest) as fh:
            base = json.load(fh)["config"]
        if "decay_iters" in base:
            base["decay_iters"] = tuple(base["decay_iters"])
        config = TrainConfig(**base)
    elif args.full_schedule:
        config = TrainConfig.full_schedule()
    else:
        config = read_config(args.config, TrainConfig)
    overrides = {}
    for f in fields(TrainConfig):
        value = getattr(args, f"set_{f.name}", None)
        if value is not None:
            overrides[f.name] = _coerce(f.name, value, getattr(TrainConfig(), f.name))
    for key, value in overrides.items():
        setattr(config, key, value)
    config.validate()
    return config


def run_training(config: TrainConfig, train_split: Dataset, test_split: Dataset, out_dir: str, resume=None, stop_at=None):
    """Train, evaluate and write checkpoint, history, metrics and attention CSV."""
    result = train(config, train_split, out_dir=out_dir, resume_from=resume, stop_at=stop_at)
    report, records = evaluate(result.model, test_split, result.centers)
    metrics_path = os.path.join(out_dir, "metrics.json")
    _write_text(metrics_path, report.to_json() + "\n")
    csv_path = os.path.join(out_dir, "attention.csv")
    write_attention_csv(csv_path, records)
    return result, report, records


def _attention_summary(records) -> dict:
    out = {}
    for key, fn in (("attention_distance_r", attention_distance_correlation), ("keyframe_gap", keyframe_attention_gap)):
        try:
            out[key] = fn(records)
        except UndefinedMetricError:
            out[key] = None
    return out


def cmd_train(args) -> int:
    config = build_train_config(args)
    if args.ablation:
        config.ablation = args.ablation
        config.validate()
    train_split, test_split, inputs = _load_splits(args.data)
    os.makedirs(args.out, exist_ok=True)
    try:
        result, report, records = run_training(config, train_split, test_split, args.out, args.resume, args.stop_at)
    except DivergenceError as exc:
        dump = {"term": exc.term, "breakdown": exc.breakdown}
        _write_text(os.path.join(args.out, "divergence.json"), json.dumps(dump, sort_keys=True, indent=2) + "\n")
        raise
    outputs = [os.path.join(args.out, n) for n in ("checkpoint.kgac", "history.jsonl", "metrics.json", "attention.csv")]
    # resolved form, so ablations show their effective switches
    write_manifest(args.out, "train", config.resolved().to_dict(), config.seed, inputs=inputs, outputs=outputs)
    print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    model, centers, _ = load_trained(args.checkpoint)
    _, test_split, _ = _load_splits(args.data)
    report, _ = evaluate(model, test_split, centers)
    print(report.to_json())
    return 0


def cmd_inspect(args) -> int:
    model, centers, _ = load_trained(args.checkpoint)
    _, test_split, inputs = _load_splits(args.data)
    _, records = evaluate(model, test_split, centers)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_attention_csv(args.out, records)
    summary = _attention_summary(records)
    summary["rows"] = int(sum(len(r.weights) for r in records))
    print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def train_and_evaluate(job):
    """Train one ``(config, train, test)`` job; returns its report dict and attention summary."""
    config, train_split, test_split = job
    result = train(config, train_split)
    report, records = evaluate(result.model, test_split, result.centers)
    return asdict(report), _attention_summary(records)


def run_suite(
    train_split: Dataset,
    test_split: Dataset,
    seeds: Sequence[int],
    base: Optional[TrainConfig] = None,
    jobs: int = 1,
) -> dict:
    """Train every ablation for every seed and summarize mean metrics per configuration."""
    base = base or TrainConfig()
    plan = []
    for ablation, _ in SUITE_ROWS:
        for seed in seeds:
            config = TrainConfig(**{**base.to_dict(), "ablation": ablation, "seed": seed})
            plan.append((config, train_split, test_split))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(train_and_evaluate, plan))
    else:
        results = [train_and_evaluate(job) for job in plan]
    rows = []
    it = iter(results)
    for ablation, label in SUITE_ROWS:
        runs = [next(it) for _ in seeds]
        reports = [r for r, _ in runs]
        row = {"configuration": label, "ablation": ablation}
        for key in ("auc", "acc", "sensitivity", "specificity"):
            row[key] = float(np.mean([r[key] for r in reports]))
        row["per_seed"] = [
            {"seed": s, **rep, **att} for s, (rep, att) in zip(seeds, runs)
        ]
        rows.append(row)
    return {"seeds": list(seeds), "base_config": base.to_dict(), "rows": rows}


def format_table(summary: dict) -> str:
    head = f"{'configuration':32s} {'AUC':>7s} {'ACC':>7s} {'Sens':>7s} {'Spec':>7s}"
    lines = [head, "-" * len(head)]
    for row in summary["rows"]:
        lines.append(
            f"{row['configuration']:32s} "
            + " ".join(f"{100 * row[k]:7.2f}" for k in ("auc", "acc", "sensitivity", "specificity"))
        )
    return "\n".join(lines) + "\n"


def cmd_suite(args) -> int:
    base = build_train_config(args)
    train_split, test_split, inputs = _load_splits(args.data)
    seeds = list(range(args.seed_offset, args.seed_offset + args.seeds))
    summary = run_suite(train_split, test_split, seeds, base, args.jobs)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "summary.json")
    table_path = os.path.join(args.out, "table.txt")
    _write_text(json_path, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    table = format_table(summary)
    _write_text(table_path, table)
    write_manifest(args.out, "ablation-suite", base.to_dict(), base.seed, inputs=inputs, outputs=[json_path, table_path])
    print(table, end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file of training settings")
    p.add_argument("--manifest", help="re-use the configuration recorded in a train manifest")
    p.add_argument("--full-schedule", action="store_true", help="8000 iterations, warmup 1000, decays at 4000/6000")
    group = p.add_argument_group("training overrides")
    for f in fields(TrainConfig):
        if f.name == "ablation":
            continue
        group.add_argument(
            f"--{f.name.replace('_', '-')}",
            dest=f"set_{f.name}",
            metavar="V",
            help=f"override {f.name} (default {getattr(TrainConfig(), f.name)!r})",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kganet", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"kganet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic train/test datasets")
    p.add_argument("--config", help="key = value file of generator settings")
    p.add_argument("--out", default=_default_out("data"), help=f"output directory (default ${OUT_ENV}/data)")
    p.add_argument("--seed", type=int, help="generator seed (overrides the config file)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration and evaluate it on the test split")
    p.add_argument("--data", required=True, help="directory holding train.kgad and test.kgad")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--out", default=_default_out("train"), help=f"output directory (default ${OUT_ENV}/train)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", type=int, help="stop after this many total iterations")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the test-split metrics report of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attention", help="export per-frame attention and center distances as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=_default_out("attention.csv"), help=f"CSV path (default ${OUT_ENV}/attention.csv)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablation-suite", help="train all four configurations over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=5, help="number of training seeds")
    p.add_argument("--seed-offset", type=int, default=0, help="first training seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", default=_default_out("suite"), help=f"output directory (default ${OUT_ENV}/suite)")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
