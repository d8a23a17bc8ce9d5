"""Detection-to-ground-truth matching and per-class metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .detector import DetectionConfig, Detection, detect, infer_timeline
from .trajstore import EVENT_CLASSES, EventLabel, MatchTrajectories

METRIC_COLUMNS = ("class", "precision", "recall", "f_score", "td_p50", "td_p95")


@dataclass
class MatchingResult:
    cls: str
    tp: list[tuple[Detection, EventLabel, int]] = field(default_factory=list)  # delta = det - gt
    fp: list[Detection] = field(default_factory=list)
    fn: list[EventLabel] = field(default_factory=list)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp), len(self.fp), len(self.fn)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f_score: float
    td_p50: float | None
    td_p95: float | None
    tp: int = 0
    fp: int = 0
    fn: int = 0


def match_events(
    detections: Sequence[Detection], ground_truth: Sequence[EventLabel], w_eval: int, cls: str
) -> MatchingResult:
    """Greedy one-to-one matching within ``(w_eval - 1) / 2`` frames.

    Pairs are taken in ascending |delta|; ties go to the earlier detection,
    then the earlier ground truth.
    """
    dets = sorted((d for d in detections if d.cls == cls), key=lambda d: d.frame)
    gts = sorted((g for g in ground_truth if g.cls == cls), key=lambda g: g.frame)
    half = (w_eval - 1) // 2
    pairs = []
    lo = 0
    for i, d in enumerate(dets):
        while lo < len(gts) and gts[lo].frame < d.frame - half:
            lo += 1
        j = lo
        while j < len(gts) and gts[j].frame <= d.frame + half:
            pairs.append((abs(d.frame - gts[j].frame), d.frame, gts[j].frame, i, j))
            j += 1
    pairs.sort()
    used_d, used_g = set(), set()
    result = MatchingResult(cls)
    for _, _, _, i, j in pairs:
        if i in used_d or j in used_g:
            continue
        used_d.add(i)
        used_g.add(j)
        result.tp.append((dets[i], gts[j], dets[i].frame - gts[j].frame))
    result.tp.sort(key=lambda t: t[1].frame)
    result.fp = [d for i, d in enumerate(dets) if i not in used_d]
    result.fn = [g for j, g in enumerate(gts) if j not in used_g]
    return result


def nearest_rank(samples: Sequence[float], q: float) -> float | None:
    """Nearest-rank percentile; ``None`` for an empty sample."""
    if not samples:
        return None
    s = sorted(samples)
    rank = max(1, math.ceil(q * len(s) - 1e-9))
    return s[min(rank, len(s)) - 1]


def metrics_from_counts(tp: int, fp: int, fn: int, td_samples: Sequence[float] = ()) -> ClassMetrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    # equals 2PR / (P + R); one integer division keeps equal ratios bit-equal
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return ClassMetrics(precision, recall, f, nearest_rank(td_samples, 0.5), nearest_rank(td_samples, 0.95), tp, fp, fn)


def td_samples(result: MatchingResult, fps: float) -> list[float]:
    return [abs(delta) / fps for _, _, delta in result.tp]


def compute_metrics(result: MatchingResult, fps: float) -> ClassMetrics:
    if fps <= 0:
        raise ValueError("fps must be positive")
    return metrics_from_counts(*result.counts, td_samples(result, fps))


def pool_results(results: Iterable[MatchingResult], fps: float) -> ClassMetrics:
    """Micro-average: pool counts and TD samples before computing ratios."""
    tp = fp = fn = 0
    tds: list[float] = []
    for r in results:
        a, b, c = r.counts
        tp, fp, fn = tp + a, fp + b, fn + c
        tds.extend(td_samples(r, fps))
    return metrics_from_counts(tp, fp, fn, tds)


def segment_bounds(frame_count: int, segment_length: int) -> list[tuple[int, int]]:
    return [(s, min(s + segment_length, frame_count)) for s in range(0, frame_count, segment_length)]


def labels_in(labels: Iterable[EventLabel], start: int, end: int) -> list[EventLabel]:
    return [e for e in labels if start <= e.frame < end]


def evaluate_segments(
    model,
    matches: Sequence[tuple[MatchTrajectories, Sequence[EventLabel]]],
    config: DetectionConfig,
    segment_length: int = 15000,
    workers: int = 1,
) -> dict[str, ClassMetrics]:
    results: dict[str, list[MatchingResult]] = {c: [] for c in EVENT_CLASSES}
    for match, labels in matches:
        for start, end in segment_bounds(match.frame_count, segment_length):
            timeline = infer_timeline(model, match, start, end, workers=workers)
            dets = detect(timeline, config)
            gt = labels_in(labels, start, end)
            for c in EVENT_CLASSES:
                results[c].append(match_events(dets, gt, config.w_eval, c))
    return {c: pool_results(results[c], config.fps) for c in EVENT_CLASSES}


# ---------------------------------------------------------------- reports


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.4f}"


def metrics_csv(metrics: dict[str, ClassMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for c in EVENT_CLASSES:
        m = metrics[c]
        w.writerow([c, _fmt(m.precision), _fmt(m.recall), _fmt(m.f_score), _fmt(m.td_p50), _fmt(m.td_p95)])
    return buf.getvalue()


def write_metrics_csv(metrics: dict[str, ClassMetrics], path: str | Path) -> None:
    Path(path).write_text(metrics_csv(metrics))


def read_metrics_csv(path: str | Path) -> dict[str, dict[str, float | None]]:
    with Path(path).open(newline="") as fh:
        return {
            r["class"]: {k: (float(v) if v else None) for k, v in r.items() if k != "class"}
            for r in csv.DictReader(fh)
        }


def metrics_table(sections: dict[str, dict[str, ClassMetrics]]) -> str:
    """Human-readable table: one block of rows per model/input mode."""
    head = f"{'model':<22} {'event':<10} {'precision':>9} {'recall':>7} {'f_score':>7} {'td@0.5':>7} {'td@0.95':>7}"
    lines = [head, "-" * len(head)]
    for name, metrics in sections.items():
        for i, c in enumerate(EVENT_CLASSES):
            m = metrics[c]
            td50 = "-" if m.td_p50 is None else f"{m.td_p50:.2f}"
            td95 = "-" if m.td_p95 is None else f"{m.td_p95:.2f}"
            label = name if i == 0 else ""
            lines.append(
                f"{label:<22} {c:<10} {m.precision:>9.2f} {m.recall:>7.2f} {m.f_score:>7.2f} {td50:>7} {td95:>7}"
            )
        lines.append("-" * len(head))
    return "\n".join(lines) + "\n"
