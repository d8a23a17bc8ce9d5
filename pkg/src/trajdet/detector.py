"""Sliding-window inference and threshold + NMS event detection."""

from __future__ import annotations

import bisect
import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .trajstore import ALL_CLASSES, CLASS_INDEX, EVENT_CLASSES, MatchTrajectories, WindowSpec, build_windows, normalize, windows_to_features

log = logging.getLogger(__name__)

INFER_CHUNK = 256  # fixed so results do not depend on the worker count


@dataclass(frozen=True)
class ProbabilityTimeline:
    """Per-frame class probabilities for frames ``start .. end - 1``."""

    match_id: str
    start: int
    end: int
    rows: np.ndarray  # (end - start, 4), columns in ALL_CLASSES order

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape != (self.end - self.start, len(ALL_CLASSES)):
            raise ValueError(f"timeline rows shape {rows.shape} does not match segment [{self.start}, {self.end})")
        if len(rows) and np.abs(rows.sum(axis=1) - 1.0).max() > 1e-6:
            raise ValueError("timeline rows must each sum to 1")
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True, order=True)
class Detection:
    frame: int
    cls: str
    confidence: float = field(compare=False)


@dataclass(frozen=True)
class DetectionConfig:
    tau: dict[str, float] = field(default_factory=lambda: {c: 0.5 for c in EVENT_CLASSES})
    w_nms: dict[str, int] = field(default_factory=lambda: {c: 25 for c in EVENT_CLASSES})
    w_eval: int = 51
    fps: float = 30.0

    def __post_init__(self):
        for c in EVENT_CLASSES:
            t, w = self.tau.get(c), self.w_nms.get(c)
            if t is None or not 0.0 < t < 1.0:
                raise ValueError(f"tau[{c}] must lie in (0, 1), got {t}")
            if w is None or w < 3 or w % 2 == 0:
                raise ValueError(f"w_nms[{c}] must be odd and >= 3, got {w}")
        if self.w_eval < 1 or self.w_eval % 2 == 0:
            raise ValueError(f"w_eval must be odd, got {self.w_eval}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def to_json(self) -> dict:
        return {"tau": dict(self.tau), "w_nms": dict(self.w_nms), "w_eval": self.w_eval, "fps": self.fps}

    @classmethod
    def from_json(cls, obj: dict) -> DetectionConfig:
        return cls(
            {k: float(v) for k, v in obj["tau"].items()},
            {k: int(v) for k, v in obj["w_nms"].items()},
            int(obj.get("w_eval", 51)),
            float(obj.get("fps", 30.0)),
        )


# ---------------------------------------------------------------- inference


def _ball_windows_ok(match: MatchTrajectories, spec: WindowSpec, centers: np.ndarray) -> np.ndarray:
    _, mask, _ = match.dense()
    seen = np.concatenate([[0], np.cumsum(mask[:, 0].astype(np.int64))])
    lo = np.clip(centers - spec.half, 0, match.frame_count)
    hi = np.clip(centers + spec.half + 1, 0, match.frame_count)
    return seen[hi] - seen[lo] > 0


def _infer_chunk(model, match: MatchTrajectories, spec: WindowSpec, centers: np.ndarray) -> np.ndarray:
    values, _ = build_windows(match, spec, centers)
    return model.predict(windows_to_features(values))


def infer_timeline(
    model,
    match: MatchTrajectories,
    start: int = 0,
    end: int | None = None,
    spec: WindowSpec | None = None,
    workers: int = 1,
) -> ProbabilityTimeline:
    """Run the model on a window centered at every frame of ``[start, end)``.

    Frames whose window never sees the ball get a pure-background row.
    """
    spec = spec or model.window_spec
    if (spec.t, spec.k) != (model.window_spec.t, model.window_spec.k):
        raise ValueError(f"window spec {spec} does not match model input {model.window_spec}")
    match = normalize(match)
    end = match.frame_count if end is None else end
    if not 0 <= start < end <= match.frame_count:
        raise ValueError(f"segment [{start}, {end}) outside match of {match.frame_count} frames")
    centers = np.arange(start, end)
    rows = np.zeros((len(centers), len(ALL_CLASSES)))
    ok = _ball_windows_ok(match, spec, centers)
    if not ok.all():
        log.warning("no ball in %d windows of %s; emitting background rows", int((~ok).sum()), match.match_id)
        rows[~ok, 0] = 1.0
    good = centers[ok]
    chunks = [good[i : i + INFER_CHUNK] for i in range(0, len(good), INFER_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_infer_chunk, [model] * len(chunks), [match] * len(chunks), [spec] * len(chunks), chunks))
    else:
        parts = [_infer_chunk(model, match, spec, c) for c in chunks]
    if parts:
        rows[ok] = np.concatenate(parts)
    return ProbabilityTimeline(match.match_id, start, end, rows)


# ---------------------------------------------------------------- detection


def greedy_nms(frames: np.ndarray, scores: np.ndarray, w_nms: int) -> list[int]:
    """Indices kept by greedy NMS, in acceptance order.

    Candidates are visited by descending score, earlier frame first on ties;
    one is dropped when an accepted candidate lies strictly closer than
    ``w_nms`` frames.
    """
    order = np.lexsort((frames, -scores))
    kept: list[int] = []
    taken: list[int] = []  # accepted frames, sorted
    for i in order.tolist():
        f = int(frames[i])
        j = bisect.bisect_left(taken, f)
        if j < len(taken) and taken[j] - f < w_nms:
            continue
        if j > 0 and f - taken[j - 1] < w_nms:
            continue
        taken.insert(j, f)
        kept.append(i)
    return kept


def detect_class(timeline: ProbabilityTimeline, cls: str, tau: float, w_nms: int) -> list[Detection]:
    p = timeline.rows[:, CLASS_INDEX[cls]]
    cand = np.flatnonzero(p >= tau)
    kept = greedy_nms(cand, p[cand], w_nms)
    return sorted(Detection(int(cand[i]) + timeline.start, cls, float(p[cand[i]])) for i in kept)


def detect(timeline: ProbabilityTimeline, config: DetectionConfig) -> list[Detection]:
    dets: list[Detection] = []
    for c in EVENT_CLASSES:
        dets.extend(detect_class(timeline, c, config.tau[c], config.w_nms[c]))
    return sorted(dets, key=lambda d: (d.frame, CLASS_INDEX[d.cls]))


# ---------------------------------------------------------------- export


def write_timeline_csv(timeline: ProbabilityTimeline, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + [f"p_{c}" for c in ALL_CLASSES])
        for i, row in enumerate(timeline.rows):
            w.writerow([timeline.start + i] + [repr(float(v)) for v in row])


def read_timeline_csv(path: str | Path, match_id: str = "") -> ProbabilityTimeline:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["frame"] + [f"p_{c}" for c in ALL_CLASSES]:
            raise ValueError(f"{path}: unexpected timeline header {header}")
        rows = [[float(v) for v in r] for r in reader if r]
    arr = np.array(rows).reshape(-1, 1 + len(ALL_CLASSES))
    frames = arr[:, 0].astype(np.int64)
    if len(frames) and np.any(np.diff(frames) != 1):
        raise ValueError(f"{path}: timeline frames must be consecutive")
    start = int(frames[0]) if len(frames) else 0
    return ProbabilityTimeline(match_id, start, start + len(frames), arr[:, 1:])


def write_detections_csv(detections: Sequence[Detection], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "frame", "confidence"])
        for d in detections:
            w.writerow([d.cls, d.frame, repr(d.confidence)])


def read_detections_csv(path: str | Path) -> list[Detection]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [Detection(int(r["frame"]), r["class"], float(r["confidence"])) for r in reader]


def save_detection_config(config: DetectionConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")
