"""Per-class grid search over detection threshold and NMS window."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detection, DetectionConfig, ProbabilityTimeline, greedy_nms
from .evaluator import match_events, metrics_from_counts
from .trajstore import CLASS_INDEX, EVENT_CLASSES, EventLabel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridSpec:
    tau_start: float = 0.30
    tau_stop: float = 0.98
    tau_step: float = 0.02
    w_start: int = 3
    w_stop: int = 59
    w_step: int = 2

    def __post_init__(self):
        if self.tau_step <= 0 or self.w_step <= 0:
            raise ValueError("grid steps must be positive")

    @property
    def taus(self) -> list[float]:
        n = int(round((self.tau_stop - self.tau_start) / self.tau_step)) + 1
        return [round(self.tau_start + i * self.tau_step, 10) for i in range(n)]

    @property
    def windows(self) -> list[int]:
        return list(range(self.w_start, self.w_stop + 1, self.w_step))

    def __len__(self) -> int:
        return len(self.taus) * len(self.windows)


@dataclass(frozen=True)
class ClassTuning:
    tau: float
    w_nms: int
    f_score: float
    tunable: bool = True


@dataclass(frozen=True)
class TunedConfig:
    classes: dict[str, ClassTuning]
    w_eval: int = 51
    fps: float = 30.0

    def detection_config(self) -> DetectionConfig:
        return DetectionConfig(
            {c: t.tau for c, t in self.classes.items()},
            {c: t.w_nms for c, t in self.classes.items()},
            self.w_eval,
            self.fps,
        )

    def to_json(self) -> dict:
        return {
            "w_eval": self.w_eval,
            "fps": self.fps,
            "classes": {
                c: {"tau": t.tau, "w_nms": t.w_nms, "f_score": t.f_score, "tunable": t.tunable}
                for c, t in self.classes.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> TunedConfig:
        classes = {
            c: ClassTuning(float(v["tau"]), int(v["w_nms"]), float(v["f_score"]), bool(v.get("tunable", True)))
            for c, v in obj["classes"].items()
        }
        return cls(classes, int(obj["w_eval"]), float(obj["fps"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> TunedConfig:
        return cls.from_json(json.loads(Path(path).read_text()))


def _better(a: tuple[float, float, int], b: tuple[float, float, int] | None) -> bool:
    """Higher F wins, then higher tau, then smaller window."""
    if b is None:
        return True
    return (a[0], a[1], -a[2]) > (b[0], b[1], -b[2])


def tune_class(
    timelines: Sequence[ProbabilityTimeline],
    ground_truth: Sequence[Sequence[EventLabel]],
    cls: str,
    grid: GridSpec,
    w_eval: int,
) -> ClassTuning:
    taus = grid.taus
    n_gt = sum(1 for gt in ground_truth for e in gt if e.cls == cls)
    if n_gt == 0:
        log.warning("no validation ground truth for %s; using default tau=0.5, w_nms=%d", cls, w_eval)
        return ClassTuning(0.5, w_eval, 0.0, tunable=False)
    col = CLASS_INDEX[cls]
    tau_min = min(taus)
    cands = []
    for tl in timelines:
        p = tl.rows[:, col]
        idx = np.flatnonzero(p >= tau_min)
        cands.append((tl.start + idx, p[idx]))
    best = None
    for w in grid.windows:
        counts = np.zeros((len(taus), 3), dtype=np.int64)
        for (frames, scores), gt in zip(cands, ground_truth):
            # greedy NMS visits candidates by descending score, so the result
            # at a higher threshold is the accepted set filtered by that threshold
            kept = greedy_nms(frames, scores, w)
            accepted = [Detection(int(frames[i]), cls, float(scores[i])) for i in kept]
            for ti, tau in enumerate(taus):
                dets = [d for d in accepted if d.confidence >= tau]
                counts[ti] += match_events(dets, gt, w_eval, cls).counts
        for ti, tau in enumerate(taus):
            f = metrics_from_counts(*counts[ti]).f_score
            if _better((f, tau, w), best):
                best = (f, tau, w)
    return ClassTuning(best[1], best[2], best[0])


def tune(
    timelines: Sequence[ProbabilityTimeline],
    ground_truth: Sequence[Sequence[EventLabel]],
    grid: GridSpec | None = None,
    w_eval: int = 51,
    fps: float = 30.0,
) -> TunedConfig:
    """Pick (tau, w_nms) per class maximizing pooled validation F-score.

    ``ground_truth[i]`` holds the labels falling inside ``timelines[i]``.
    """
    if len(timelines) != len(ground_truth):
        raise ValueError("need one ground-truth list per timeline")
    grid = grid or GridSpec()
    return TunedConfig({c: tune_class(timelines, ground_truth, c, grid, w_eval) for c in EVENT_CLASSES}, w_eval, fps)
