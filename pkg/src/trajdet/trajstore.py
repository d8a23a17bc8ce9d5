"""Trajectory data model, file I/O and window-tensor construction."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

EVENT_CLASSES: tuple[str, ...] = ("pass", "reception", "shot")
ALL_CLASSES: tuple[str, ...] = ("background",) + EVENT_CLASSES
CLASS_INDEX: dict[str, int] = {c: i for i, c in enumerate(ALL_CLASSES)}

ALL_PLAYERS = -1  # WindowSpec.k sentinel: every tracked player

Kind = Literal["ball", "player"]
Team = Literal["home", "away"]


class TrajectoryFormatError(ValueError):
    """Malformed trajectory or label file."""


class LabelRangeError(ValueError):
    """Label frame outside the match."""


class NoBallError(ValueError):
    """The ball is absent over every frame of a window."""


@dataclass(frozen=True)
class PitchSpec:
    length: float = 105.0
    width: float = 68.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"pitch dimensions must be positive, got {self.length} x {self.width}")


@dataclass(frozen=True, eq=False)
class ObjectTrack:
    """One object's samples. ``frames`` is strictly increasing."""

    object_id: str
    kind: Kind
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    present: np.ndarray
    team: Team | None = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.int64)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        object.__setattr__(self, "present", np.asarray(self.present, dtype=bool))
        if not (len(frames) == len(self.x) == len(self.y) == len(self.present)):
            raise ValueError(f"track {self.object_id}: sample arrays differ in length")
        if len(frames) > 1 and np.any(np.diff(frames) <= 0):
            raise ValueError(f"track {self.object_id}: frame indices must be strictly increasing")
        for a in (frames, self.x, self.y, self.present):
            a.setflags(write=False)

    def __eq__(self, other):
        if not isinstance(other, ObjectTrack):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and self.kind == other.kind
            and self.team == other.team
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.present, other.present)
        )


@dataclass(frozen=True, eq=False)
class MatchTrajectories:
    pitch: PitchSpec
    fps: float
    tracks: tuple[ObjectTrack, ...]
    frame_count: int
    match_id: str = ""
    normalized: bool = False
    _dense: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        balls = [t for t in self.tracks if t.kind == "ball"]
        if len(balls) != 1:
            raise ValueError(f"match must contain exactly one ball track, found {len(balls)}")
        ids = [t.object_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate object ids")
        for t in self.tracks:
            if len(t.frames) and (t.frames[0] < 0 or t.frames[-1] >= self.frame_count):
                raise ValueError(f"track {t.object_id}: sample frame outside [0, {self.frame_count})")

    def __eq__(self, other):
        if not isinstance(other, MatchTrajectories):
            return NotImplemented
        return (
            self.pitch == other.pitch
            and self.fps == other.fps
            and self.frame_count == other.frame_count
            and self.match_id == other.match_id
            and self.normalized == other.normalized
            and self.tracks == other.tracks
        )

    @property
    def ball(self) -> ObjectTrack:
        return next(t for t in self.tracks if t.kind == "ball")

    @property
    def players(self) -> list[ObjectTrack]:
        """Player tracks in ascending object_id order."""
        return sorted((t for t in self.tracks if t.kind == "player"), key=lambda t: t.object_id)

    def dense(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Positions (frames, objects, 2) and presence (frames, objects).

        Object 0 is the ball; players follow in ascending id order. Absent
        entries are zero.
        """
        if "pos" not in self._dense:
            order = [self.ball] + self.players
            pos = np.zeros((self.frame_count, len(order), 2))
            mask = np.zeros((self.frame_count, len(order)), dtype=bool)
            for j, t in enumerate(order):
                p = t.present
                pos[t.frames[p], j, 0] = t.x[p]
                pos[t.frames[p], j, 1] = t.y[p]
                mask[t.frames[p], j] = True
            pos.setflags(write=False)
            mask.setflags(write=False)
            self._dense.update(pos=pos, mask=mask, ids=[t.object_id for t in order])
        return self._dense["pos"], self._dense["mask"], self._dense["ids"]


@dataclass(frozen=True, order=True)
class EventLabel:
    frame: int
    cls: str

    def __post_init__(self):
        if self.cls not in EVENT_CLASSES:
            raise ValueError(f"unknown event class {self.cls!r}")


@dataclass(frozen=True)
class WindowSpec:
    """``k = 0`` is ball only, ``k = ALL_PLAYERS`` keeps every player."""

    t: int = 51
    k: int = 5

    def __post_init__(self):
        if self.t < 1 or self.t % 2 == 0:
            raise ValueError(f"window length must be odd and positive, got {self.t}")
        if self.k < 0 and self.k != ALL_PLAYERS:
            raise ValueError(f"k must be >= 0 or ALL_PLAYERS, got {self.k}")

    @property
    def half(self) -> int:
        return (self.t - 1) // 2

    def n_slots(self, match: MatchTrajectories) -> int:
        return 1 + (len(match.players) if self.k == ALL_PLAYERS else self.k)


@dataclass(frozen=True)
class WindowTensor:
    values: np.ndarray  # (2, T, N), ball in slot 0
    mask: np.ndarray  # (T, N), True where a real sample sits

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


# ---------------------------------------------------------------- file I/O


def _parse_float(v, lineno: int, key: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TrajectoryFormatError(f"line {lineno}: field {key!r} must be a number")
    v = float(v)
    if not math.isfinite(v):
        raise TrajectoryFormatError(f"line {lineno}: field {key!r} is not finite")
    return v


def _parse_int(v, lineno: int, key: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TrajectoryFormatError(f"line {lineno}: field {key!r} must be an integer")
    return v


def read_trajectories(path: str | Path, match_id: str | None = None) -> MatchTrajectories:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise TrajectoryFormatError(f"{path}: empty file")

    def parse(lineno: int, text: str) -> dict:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise TrajectoryFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise TrajectoryFormatError(f"line {lineno}: expected a JSON object")
        return obj

    header = parse(1, lines[0])
    try:
        pitch = PitchSpec(
            _parse_float(header.get("pitch_length", 105.0), 1, "pitch_length"),
            _parse_float(header.get("pitch_width", 68.0), 1, "pitch_width"),
        )
        fps = _parse_float(header.get("fps", 30.0), 1, "fps")
    except ValueError as exc:
        raise TrajectoryFormatError(f"line 1: {exc}") from None
    if "frame_count" not in header:
        raise TrajectoryFormatError("line 1: header lacks 'frame_count'")
    frame_count = _parse_int(header["frame_count"], 1, "frame_count")

    rows: dict[str, list] = {}
    meta: dict[str, tuple[str, str | None]] = {}
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(lineno, text)
        for key in ("frame", "id", "kind", "x", "y"):
            if key not in rec:
                raise TrajectoryFormatError(f"line {lineno}: missing field {key!r}")
        frame = _parse_int(rec["frame"], lineno, "frame")
        if not 0 <= frame < frame_count:
            raise TrajectoryFormatError(f"line {lineno}: frame {frame} outside [0, {frame_count})")
        oid = rec["id"]
        if not isinstance(oid, str) or not oid:
            raise TrajectoryFormatError(f"line {lineno}: field 'id' must be a non-empty string")
        kind = rec["kind"]
        if kind not in ("ball", "player"):
            raise TrajectoryFormatError(f"line {lineno}: kind must be 'ball' or 'player'")
        team = rec.get("team")
        if team not in ("home", "away", None):
            raise TrajectoryFormatError(f"line {lineno}: team must be 'home', 'away' or null")
        x = _parse_float(rec["x"], lineno, "x")
        y = _parse_float(rec["y"], lineno, "y")
        if oid in meta and meta[oid] != (kind, team):
            raise TrajectoryFormatError(f"line {lineno}: object {oid!r} changes kind or team")
        meta[oid] = (kind, team)
        samples = rows.setdefault(oid, [])
        if samples and samples[-1][0] >= frame:
            raise TrajectoryFormatError(f"line {lineno}: frames for {oid!r} not strictly increasing")
        samples.append((frame, x, y))

    tracks = []
    for oid, samples in rows.items():
        arr = np.array(samples, dtype=np.float64).reshape(-1, 3)
        kind, team = meta[oid]
        tracks.append(
            ObjectTrack(oid, kind, arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2], np.ones(len(arr), bool), team)
        )
    try:
        return MatchTrajectories(pitch, fps, tuple(tracks), frame_count, match_id or path.name.split(".")[0])
    except ValueError as exc:
        raise TrajectoryFormatError(f"{path}: {exc}") from None


def read_labels(path: str | Path, frame_count: int | None = None) -> list[EventLabel]:
    path = Path(path)
    labels: list[EventLabel] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame", "class"]:
            raise TrajectoryFormatError(f"{path}: line 1: expected header 'frame,class'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise TrajectoryFormatError(f"{path}: line {lineno}: expected 2 fields")
            try:
                frame = int(row[0])
            except ValueError:
                raise TrajectoryFormatError(f"{path}: line {lineno}: frame {row[0]!r} is not an integer") from None
            if row[1] not in EVENT_CLASSES:
                raise TrajectoryFormatError(f"{path}: line {lineno}: unknown class {row[1]!r}")
            if frame < 0 or (frame_count is not None and frame >= frame_count):
                raise LabelRangeError(f"{path}: line {lineno}: frame {frame} outside [0, {frame_count})")
            labels.append(EventLabel(frame, row[1]))
    if len(set(labels)) != len(labels):
        raise TrajectoryFormatError(f"{path}: duplicate (frame, class) label")
    return sorted(labels, key=lambda e: (e.frame, CLASS_INDEX[e.cls]))


def load_match(trajectory_file: str | Path, label_file: str | Path) -> tuple[MatchTrajectories, list[EventLabel]]:
    match = read_trajectories(trajectory_file)
    return match, read_labels(label_file, match.frame_count)


def write_trajectories(match: MatchTrajectories, path: str | Path) -> None:
    header = {
        "pitch_length": match.pitch.length,
        "pitch_width": match.pitch.width,
        "fps": match.fps,
        "frame_count": match.frame_count,
    }
    records = []
    for t in match.tracks:
        for f, x, y, p in zip(t.frames.tolist(), t.x.tolist(), t.y.tolist(), t.present.tolist()):
            if p:
                records.append((f, t.object_id, t.kind, t.team, x, y))
    # ball first within a frame, then ids ascending
    records.sort(key=lambda r: (r[0], r[2] != "ball", r[1]))
    with Path(path).open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for f, oid, kind, team, x, y in records:
            fh.write(json.dumps({"frame": f, "id": oid, "kind": kind, "team": team, "x": x, "y": y}) + "\n")


def write_labels(labels: Iterable[EventLabel], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "class"])
        for e in sorted(labels, key=lambda e: (e.frame, CLASS_INDEX[e.cls])):
            w.writerow([e.frame, e.cls])


# ------------------------------------------------------------ preprocessing


def normalize(match: MatchTrajectories) -> MatchTrajectories:
    """Scale coordinates to [0, 1] by pitch length/width, clamping noise."""
    if match.normalized:
        return match
    L, W = match.pitch.length, match.pitch.width
    tracks = []
    for t in match.tracks:
        x = np.where(t.present, np.clip(t.x / L, 0.0, 1.0), 0.0)
        y = np.where(t.present, np.clip(t.y / W, 0.0, 1.0), 0.0)
        tracks.append(replace(t, x=x, y=y))
    return replace(match, tracks=tuple(tracks), normalized=True, _dense={})


def _window_frames(spec: WindowSpec, centers: np.ndarray, frame_count: int):
    offsets = np.arange(-spec.half, spec.half + 1)
    frames = centers[:, None] + offsets[None, :]
    inside = (frames >= 0) & (frames < frame_count)
    return np.clip(frames, 0, frame_count - 1), inside


def _rank_players(match: MatchTrajectories, spec: WindowSpec, centers: np.ndarray) -> np.ndarray:
    """Player columns (1-based into ``dense()``) sorted nearest-first per center."""
    pos, mask, _ = match.dense()
    frames, inside = _window_frames(spec, centers, match.frame_count)
    ball_ok = mask[frames, 0] & inside  # (B, T)
    if np.any(~ball_ok.any(axis=1)):
        bad = int(centers[np.argmin(ball_ok.any(axis=1))])
        raise NoBallError(f"ball absent over the whole window centered on frame {bad}")
    n_players = pos.shape[1] - 1
    if n_players == 0:
        return np.zeros((len(centers), 0), dtype=np.int64)
    bxy = pos[frames, 0]  # (B, T, 2)
    pxy = pos[frames, 1:]  # (B, T, P, 2)
    both = ball_ok[:, :, None] & mask[frames, 1:]  # (B, T, P)
    d = np.sqrt(((pxy - bxy[:, :, None, :]) ** 2).sum(axis=-1))
    d = np.where(both, d, 0.0)
    count = both.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(count > 0, d.sum(axis=1) / np.maximum(count, 1), np.inf)
    # columns are in ascending id order, so a stable sort breaks ties by id
    return np.argsort(avg, axis=1, kind="stable") + 1


def k_nearest_players(match: MatchTrajectories, spec: WindowSpec, center: int) -> list[str]:
    """Ids of the ``k`` players closest to the ball on average over the window."""
    _, _, ids = match.dense()
    order = _rank_players(match, spec, np.array([center]))[0]
    k = len(order) if spec.k == ALL_PLAYERS else min(spec.k, len(order))
    return [ids[j] for j in order[:k]]


def build_windows(match: MatchTrajectories, spec: WindowSpec, centers: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Batched window construction.

    Returns values shaped (B, 2, T, N) and mask shaped (B, T, N).
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    if np.any((centers < 0) | (centers >= match.frame_count)):
        raise ValueError(f"window centers must lie in [0, {match.frame_count})")
    pos, mask, _ = match.dense()
    n_slots = spec.n_slots(match)
    order = _rank_players(match, spec, centers)
    k = n_slots - 1
    cols = np.zeros((len(centers), n_slots), dtype=np.int64)
    valid_slot = np.zeros((len(centers), n_slots), dtype=bool)
    valid_slot[:, 0] = True
    take = min(k, order.shape[1])
    cols[:, 1 : 1 + take] = order[:, :take]
    valid_slot[:, 1 : 1 + take] = True
    frames, inside = _window_frames(spec, centers, match.frame_count)
    f_idx = frames[:, :, None]
    c_idx = cols[:, None, :]
    m = mask[f_idx, c_idx] & inside[:, :, None] & valid_slot[:, None, :]
    v = np.where(m[..., None], pos[f_idx, c_idx], 0.0)  # (B, T, N, 2)
    return np.ascontiguousarray(v.transpose(0, 3, 1, 2)), m


def build_window(match: MatchTrajectories, spec: WindowSpec, center: int) -> WindowTensor:
    values, mask = build_windows(match, spec, [center])
    return WindowTensor(values[0], mask[0])


def windows_to_features(values: np.ndarray) -> np.ndarray:
    """(B, 2, T, N) window values -> (B, T, 2N) per-frame model features."""
    b, _, t, n = values.shape
    return values.transpose(0, 2, 3, 1).reshape(b, t, 2 * n)


# ---------------------------------------------------------------- occlusion


@dataclass(frozen=True)
class OcclusionPolicy:
    """Broadcast-camera style partial observation.

    Players farther than ``radius`` meters from a camera center that tracks
    the ball (exponential smoothing ``camera_lag``) are dropped; the ball is
    kept each frame with probability ``ball_retention``.
    """

    radius: float = math.inf
    ball_retention: float = 1.0
    camera_lag: float = 0.9

    def __post_init__(self):
        if self.radius < 0 or not 0.0 <= self.ball_retention <= 1.0 or not 0.0 <= self.camera_lag < 1.0:
            raise ValueError("invalid occlusion policy")


def occlude(match: MatchTrajectories, policy: OcclusionPolicy, seed: int) -> MatchTrajectories:
    rng = np.random.default_rng(seed)
    ball = match.ball
    bx = np.full(match.frame_count, np.nan)
    by = np.full(match.frame_count, np.nan)
    bx[ball.frames[ball.present]] = ball.x[ball.present]
    by[ball.frames[ball.present]] = ball.y[ball.present]
    cam = np.zeros((match.frame_count, 2))
    cur = None
    for f in range(match.frame_count):
        if not np.isnan(bx[f]):
            pt = np.array([bx[f], by[f]])
            cur = pt if cur is None else policy.camera_lag * cur + (1 - policy.camera_lag) * pt
        cam[f] = cur if cur is not None else np.nan
    keep_ball = rng.random(len(ball.frames)) < policy.ball_retention
    tracks = []
    for t in match.tracks:
        if t.kind == "ball":
            present = t.present & keep_ball
        elif math.isinf(policy.radius):
            present = t.present
        else:
            c = cam[t.frames]
            with np.errstate(invalid="ignore"):
                dist = np.hypot(t.x - c[:, 0], t.y - c[:, 1])
                present = t.present & (dist < policy.radius)
        tracks.append(replace(t, present=present, x=np.where(present, t.x, 0.0), y=np.where(present, t.y, 0.0)))
    return replace(match, tracks=tuple(tracks), _dense={})
