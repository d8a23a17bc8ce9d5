"""Command-line entry point: simulate, train, infer, tune, evaluate, report.

Every subcommand reads an optional JSON config (``--config``), applies
``--set section.key=value`` overrides and dedicated flags on top, and writes
its products to files. Logs go to stderr as JSON lines.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .detector import ProbabilityTimeline, detect, infer_timeline, write_detections_csv, write_timeline_csv
from .evaluator import ClassMetrics, evaluate_segments, labels_in, metrics_table, read_metrics_csv, segment_bounds, write_metrics_csv
from .models import ModelConfig, SamplingError, TrainConfig, TrainingDiverged, TrajectoryModel, train
from .simgen import SimConfig, generate_many, train_test_split
from .trajstore import (
    EVENT_CLASSES,
    EventLabel,
    LabelRangeError,
    MatchTrajectories,
    NoBallError,
    PitchSpec,
    TrajectoryFormatError,
    load_match,
    write_labels,
    write_trajectories,
)
from .tuner import GridSpec, TunedConfig, tune

log = logging.getLogger("trajdet")

WORKERS_ENV = "TRAJDET_WORKERS"
MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid configuration file or override."""


class DataError(ValueError):
    """Missing or malformed input data."""


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TuneSettings:
    segment_length: int = 500
    segments: int = 0  # 0 uses every segment of the validation matches
    w_eval: int = 51

    def __post_init__(self):
        if self.segment_length < 1 or self.segments < 0:
            raise ValueError("segment_length must be positive and segments >= 0")
        if self.w_eval < 1 or self.w_eval % 2 == 0:
            raise ValueError(f"w_eval must be odd, got {self.w_eval}")


@dataclass(frozen=True)
class EvalSettings:
    segment_length: int = 15000

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Merged run configuration; ``seed`` is the only source of randomness."""

    seed: int = 0
    workers: int | None = None
    matches: int = 14
    split: tuple[int, int, int] = (10, 2, 2)
    sim: SimConfig = field(default_factory=SimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    tune: TuneSettings = field(default_factory=TuneSettings)
    evaluate: EvalSettings = field(default_factory=EvalSettings)

    @property
    def sim_config(self) -> SimConfig:
        return dataclasses.replace(self.sim, seed=self.seed)

    @property
    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def resolved_workers(self) -> int:
        if self.workers is not None:
            return self.workers
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1")
            return n
        return os.cpu_count() or 1

    def to_json(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))


_SECTIONS = {"sim": SimConfig, "model": ModelConfig, "train": TrainConfig, "grid": GridSpec, "tune": TuneSettings, "evaluate": EvalSettings}
_TOP = {"seed", "workers", "matches", "split"}


def _coerce(where: str, value: Any, default: Any) -> Any:
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
        if default and all(isinstance(v, int) for v in default):
            if any(not isinstance(v, int) for v in value):
                raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
            return tuple(value)
        if len(value) != len(default):
            raise ConfigError(f"{where}: expected {len(default)} numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, PitchSpec):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return _build(where, PitchSpec, value)
    raise ConfigError(f"{where}: unsupported field")


def _build(where: str, cls, obj: dict):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in obj.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}: unknown field")
        if key == "seed":
            raise ConfigError(f"{where}.seed: set the top-level seed instead")
        kwargs[key] = _coerce(f"{where}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(obj: dict) -> RunConfig:
    """Validate a config dictionary; every error names the offending field."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    for key in obj:
        if key not in _TOP and key not in _SECTIONS:
            raise ConfigError(f"{key}: unknown field")
    top: dict[str, Any] = {}
    if "seed" in obj:
        top["seed"] = _coerce("seed", obj["seed"], 0)
    if obj.get("workers") is not None:
        top["workers"] = _coerce("workers", obj["workers"], 0)
        if top["workers"] < 1:
            raise ConfigError("workers: must be >= 1")
    if "matches" in obj:
        top["matches"] = _coerce("matches", obj["matches"], 0)
        if top["matches"] < 3:
            raise ConfigError("matches: need at least 3")
    if "split" in obj:
        top["split"] = _coerce("split", obj["split"], (0, 0, 0))
        if len(top["split"]) != 3 or min(top["split"]) < 1:
            raise ConfigError("split: expected three positive integers")
    sections = {name: _build(name, cls, obj[name]) for name, cls in _SECTIONS.items() if name in obj}
    return RunConfig(**top, **sections)


def _set_path(obj: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = path.strip().split(".")
    node = obj
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the JSON file, then ``section.key=value`` overrides."""
    obj: dict = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    for item in overrides:
        _set_path(obj, item)
    return parse_config(obj)


# ---------------------------------------------------------------- pipeline steps


def simulate(cfg: RunConfig, out_dir: str | Path) -> dict:
    """Write ``<id>.jsonl``, ``<id>.labels.csv`` and a manifest with the splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sims = generate_many(cfg.sim_config, cfg.matches)
    for m in sims:
        mid = m.trajectories.match_id
        write_trajectories(m.trajectories, out / f"{mid}.jsonl")
        write_labels(m.labels, out / f"{mid}.labels.csv")
        log.info(json.dumps({"event": "simulated", "match": mid, "labels": len(m.labels)}))
    ids = [m.trajectories.match_id for m in sims]
    tr, va, te = train_test_split(ids, cfg.split, cfg.seed)
    manifest = {"format": "trajdet-dataset/1", "config": cfg.to_json(), "splits": {"train": tr, "val": va, "test": te}}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_split(data_dir: str | Path, split: str) -> list[tuple[MatchTrajectories, list[EventLabel]]]:
    data = Path(data_dir)
    try:
        manifest = json.loads((data / MANIFEST).read_text())
    except FileNotFoundError:
        raise DataError(f"{data / MANIFEST} not found; run simulate first or supply a manifest") from None
    if split not in manifest.get("splits", {}):
        raise DataError(f"manifest has no split {split!r}")
    out = []
    for mid in manifest["splits"][split]:
        traj, labels = data / f"{mid}.jsonl", data / f"{mid}.labels.csv"
        if not traj.exists() or not labels.exists():
            raise DataError(f"match {mid}: {traj.name} or {labels.name} missing in {data}")
        out.append(load_match(traj, labels))
    return out


def train_model(cfg: RunConfig, data_dir: str | Path, checkpoint: str | Path) -> TrajectoryModel:
    """Train on the ``train`` split, select on ``val``; writes the checkpoint and a JSONL training log."""
    train_set = load_split(data_dir, "train")
    val_set = load_split(data_dir, "val")
    model = TrajectoryModel(cfg.model, seed=cfg.seed)
    model, history = train(model, train_set, cfg.train_config, validation=val_set)
    model.save(checkpoint, cfg.train_config)
    with Path(str(checkpoint) + ".log.jsonl").open("w") as fh:
        for h in history:
            fh.write(json.dumps(dataclasses.asdict(h), sort_keys=True) + "\n")
    return model


def load_model(checkpoint: str | Path) -> TrajectoryModel:
    try:
        return TrajectoryModel.load(checkpoint)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _check_finite(tl: ProbabilityTimeline) -> ProbabilityTimeline:
    if not np.isfinite(tl.rows).all():
        raise FloatingPointError(f"non-finite probabilities in timeline of {tl.match_id}")
    return tl


def validation_timelines(cfg: RunConfig, model: TrajectoryModel, matches) -> tuple[list[ProbabilityTimeline], list[list[EventLabel]]]:
    """Timelines of validation segments, inferred once per match and then sliced."""
    workers = cfg.resolved_workers()
    segs = []
    for mi, (m, _) in enumerate(matches):
        for s, e in segment_bounds(m.frame_count, cfg.tune.segment_length):
            segs.append((mi, s, e))
    if cfg.tune.segments and len(segs) > cfg.tune.segments:
        pick = np.random.default_rng(cfg.seed).choice(len(segs), cfg.tune.segments, replace=False)
        segs = [segs[i] for i in sorted(pick)]
    full = {}
    for mi in sorted({mi for mi, _, _ in segs}):
        full[mi] = _check_finite(infer_timeline(model, matches[mi][0], workers=workers))
    timelines = [ProbabilityTimeline(full[mi].match_id, s, e, full[mi].rows[s:e]) for mi, s, e in segs]
    gts = [labels_in(matches[mi][1], s, e) for mi, s, e in segs]
    return timelines, gts


def tune_model(cfg: RunConfig, checkpoint: str | Path, data_dir: str | Path, out: str | Path) -> TunedConfig:
    model = load_model(checkpoint)
    val_set = load_split(data_dir, "val")
    timelines, gts = validation_timelines(cfg, model, val_set)
    tuned = tune(timelines, gts, cfg.grid, cfg.tune.w_eval, val_set[0][0].fps)
    tuned.save(out)
    for c, t in tuned.classes.items():
        log.info(json.dumps({"event": "tuned", "class": c, "tau": t.tau, "w_nms": t.w_nms, "f_score": round(float(t.f_score), 6)}))
    return tuned


def infer(cfg: RunConfig, checkpoint: str | Path, data_dir: str | Path, split: str, out_dir: str | Path, tuned: str | Path | None = None) -> None:
    model = load_model(checkpoint)
    det_cfg = load_tuned(tuned).detection_config() if tuned else None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for match, _ in load_split(data_dir, split):
        tl = _check_finite(infer_timeline(model, match, workers=cfg.resolved_workers()))
        write_timeline_csv(tl, out / f"{match.match_id}.timeline.csv")
        if det_cfg is not None:
            write_detections_csv(detect(tl, det_cfg), out / f"{match.match_id}.detections.csv")


def load_tuned(path: str | Path) -> TunedConfig:
    try:
        return TunedConfig.load(path)
    except FileNotFoundError:
        raise DataError(f"tuned config {path} not found") from None
    except (KeyError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"tuned config {path} is malformed: {exc}") from None


def evaluate(cfg: RunConfig, checkpoint: str | Path, tuned: str | Path, data_dir: str | Path, out_dir: str | Path, split: str = "test") -> dict[str, ClassMetrics]:
    """Writes ``metrics.csv`` and a human-readable ``metrics.txt``."""
    model = load_model(checkpoint)
    det_cfg = load_tuned(tuned).detection_config()
    matches = load_split(data_dir, split)
    metrics = evaluate_segments(model, matches, det_cfg, cfg.evaluate.segment_length, cfg.resolved_workers())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(metrics, out / "metrics.csv")
    (out / "metrics.txt").write_text(metrics_table({Path(checkpoint).stem: metrics}))
    return metrics


def report(named_metrics: Sequence[tuple[str, str | Path]], out: str | Path) -> str:
    """Combine metrics CSVs into one table, one section per name."""
    sections = {}
    for name, path in named_metrics:
        try:
            rows = read_metrics_csv(path)
        except FileNotFoundError:
            raise DataError(f"metrics file {path} not found") from None
        missing = [c for c in EVENT_CLASSES if c not in rows]
        if missing:
            raise DataError(f"{path}: no rows for {missing}")
        sections[name] = {
            c: ClassMetrics(r["precision"], r["recall"], r["f_score"], r["td_p50"], r["td_p95"])
            for c, r in rows.items()
        }
    text = metrics_table(sections)
    Path(out).write_text(text)
    return text


# ---------------------------------------------------------------- entry point


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        entry: dict[str, Any] = {"level": record.levelname.lower(), "logger": record.name}
        try:
            parsed = json.loads(msg)
        except ValueError:
            parsed = None
        if isinstance(parsed, dict):
            entry.update(parsed)
        else:
            entry["message"] = msg
        return json.dumps(entry, sort_keys=True, default=str)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config field (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--workers", type=int, help=f"parallel inference workers (default: ${WORKERS_ENV} or all cores)")
    common.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])

    p = _Parser(prog="trajdet", description="Event detection from soccer trajectories.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--matches", type=int)
    s.add_argument("--duration", type=float, help="minutes per match")

    s = sub.add_parser("train", parents=[common], help="train a model on the train split")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--variant", choices=["tcn", "transformer", "tcn_transformer"])
    s.add_argument("--k", type=int, help="nearest players per window (-1 keeps all)")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("infer", parents=[common], help="write per-frame probability timelines")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--tuned", help="also write detections using this tuned config")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("tune", parents=[common], help="grid-search thresholds on the val split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="tuned config JSON")

    s = sub.add_parser("evaluate", parents=[common], help="metrics on a split")
    s.add_argument("--model", required=True)
    s.add_argument("--tuned", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=SPLITS)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("report", parents=[common], help="combine metrics files into one table")
    s.add_argument("metrics", nargs="+", metavar="NAME=METRICS_CSV")
    s.add_argument("--out", required=True)
    return p


def _overrides(args: argparse.Namespace) -> list[str]:
    sets = list(args.set)
    flag_map = {
        "seed": "seed",
        "workers": "workers",
        "matches": "matches",
        "duration": "sim.duration_min",
        "variant": "model.variant",
        "k": "model.k",
        "epochs": "train.max_epochs",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            sets.append(f"{key}={json.dumps(v)}")
    return sets


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(args.log_level.upper())

    cfg = load_config(args.config, _overrides(args))
    if args.command == "simulate":
        simulate(cfg, args.out)
    elif args.command == "train":
        train_model(cfg, args.data, args.out)
    elif args.command == "infer":
        infer(cfg, args.model, args.data, args.split, args.out, args.tuned)
    elif args.command == "tune":
        tune_model(cfg, args.model, args.data, args.out)
    elif args.command == "evaluate":
        evaluate(cfg, args.model, args.tuned, args.data, args.out, args.split)
    elif args.command == "report":
        pairs = []
        for item in args.metrics:
            name, sep, path = item.partition("=")
            if not sep or not name:
                raise ConfigError(f"report expects NAME=METRICS_CSV, got {item!r}")
            pairs.append((name, path))
        report(pairs, args.out)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        log.error(json.dumps({"event": "config_error", "error": str(exc)}))
        return 1
    except (DataError, TrajectoryFormatError, LabelRangeError, NoBallError, SamplingError) as exc:
        log.error(json.dumps({"event": "data_error", "error": str(exc)}))
        return 2
    except (TrainingDiverged, FloatingPointError) as exc:
        log.error(json.dumps({"event": "numeric_error", "error": str(exc)}))
        return 3


if __name__ == "__main__":
    sys.exit(main())
