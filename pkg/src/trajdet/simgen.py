"""Synthetic soccer matches with frame-exact pass / reception / shot labels.

Kinematics are deliberately simple: players drift around formation anchors
that follow the ball, the possessor dribbles and then passes or shoots, and
the ball flies with exponential drag until it is within the control radius
of its receiver. A shot is always collected by the defending goalkeeper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .trajstore import EventLabel, MatchTrajectories, ObjectTrack, PitchSpec

# formation anchors for a team attacking +x on a 105 x 68 pitch, keeper first
_FORMATION = np.array(
    [
        [3.0, 34.0],
        [22.0, 10.0], [20.0, 26.0], [20.0, 42.0], [22.0, 58.0],
        [42.0, 12.0], [40.0, 28.0], [40.0, 40.0], [42.0, 56.0],
        [62.0, 24.0], [62.0, 44.0],
    ]
)  # fmt: skip


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    duration_min: float = 10.0
    fps: float = 30.0
    players_per_team: int = 11
    pitch: PitchSpec = field(default_factory=PitchSpec)
    max_player_speed: float = 7.0
    dribble_speed: tuple[float, float] = (1.5, 4.0)
    pass_speed: tuple[float, float] = (9.0, 17.0)
    shot_speed: tuple[float, float] = (22.0, 30.0)
    pass_distance: tuple[float, float] = (6.0, 30.0)
    control_radius: float = 1.0
    ball_drag: float = 0.35
    hold_time: tuple[float, float] = (1.5, 6.0)
    shot_range: float = 30.0
    shot_probability: float = 0.1
    interception_probability: float = 0.1

    def __post_init__(self):
        speeds = (self.max_player_speed, *self.dribble_speed, *self.pass_speed, *self.shot_speed)
        if min(speeds) <= 0:
            raise ValueError("all speeds must be positive")
        if self.control_radius <= 0:
            raise ValueError("control radius must be positive")
        if not 2 <= self.players_per_team <= len(_FORMATION):
            raise ValueError(f"players_per_team must be in [2, {len(_FORMATION)}]")
        if self.duration_min <= 0 or self.fps <= 0:
            raise ValueError("duration and fps must be positive")
        if self.dribble_speed[1] >= self.max_player_speed:
            raise ValueError("dribble speed must stay below the max player speed")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration_min * 60 * self.fps))


@dataclass(frozen=True)
class PossessionEntry:
    frame: int
    event: str  # "pass", "shot" or "reception"
    player_id: str
    target_id: str | None = None


@dataclass(frozen=True)
class SimMatch:
    trajectories: MatchTrajectories
    labels: list[EventLabel]
    possession: list[PossessionEntry]


def _player_ids(n: int) -> list[str]:
    return [f"h{i:02d}" for i in range(n)] + [f"a{i:02d}" for i in range(n)]


def _clamp(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(p, lo), hi)


def generate(config: SimConfig, match_id: str = "") -> SimMatch:
    rng = np.random.default_rng(config.seed)
    L, W = config.pitch.length, config.pitch.width
    dt = 1.0 / config.fps
    n = config.players_per_team
    n_all = 2 * n
    ids = _player_ids(n)
    team = np.array([0] * n + [1] * n)  # 0 home attacks +x, 1 away attacks -x
    keeper = {0: 0, 1: n}
    scale = np.array([L / 105.0, W / 68.0])
    base = _FORMATION[:n] * scale
    anchors = np.concatenate([base, np.column_stack([L - base[:, 0], W - base[:, 1]])])
    lo, hi = np.array([0.0, 0.0]), np.array([L, W])
    inner_lo, inner_hi = np.array([1.0, 1.0]), np.array([L - 1.0, W - 1.0])
    goal_x = {0: L, 1: 0.0}  # goal each team attacks
    own_x = {0: 0.0, 1: L}

    frames = config.frame_count
    pos = anchors + rng.uniform(-2, 2, size=(n_all, 2))
    vel = np.zeros((n_all, 2))
    wander = rng.uniform(-6, 6, size=(n_all, 2))
    wander_until = rng.integers(30, 120, size=n_all)

    # kickoff: a home midfielder starts with the ball
    possessor = 6 if n > 6 else 1
    pos[possessor] = [L / 2 - 1.0, W / 2]
    ball = pos[possessor].copy()
    ball_vel = np.zeros(2)
    phase = "control"
    decide_at = int(rng.uniform(*config.hold_time) * config.fps)
    dribble_dir = np.array([1.0, 0.0])
    dribble_speed = rng.uniform(*config.dribble_speed)
    receiver = -1
    target = np.zeros(2)
    flight_dir = np.zeros(2)
    flight_start = 0

    out = np.zeros((frames, n_all + 1, 2))
    labels: list[EventLabel] = []
    log: list[PossessionEntry] = []

    def start_control(p: int, f: int) -> None:
        nonlocal possessor, phase, decide_at, dribble_dir, dribble_speed
        possessor, phase = p, "control"
        decide_at = f + max(int(rng.uniform(*config.hold_time) * config.fps), 15)
        ang = rng.uniform(-1.0, 1.0)
        sgn = 1.0 if team[p] == 0 else -1.0
        dribble_dir = np.array([sgn * math.cos(ang), math.sin(ang)])
        dribble_speed = rng.uniform(*config.dribble_speed)

    def kick(f: int) -> None:
        nonlocal phase, receiver, target, ball_vel, flight_dir, flight_start, decide_at
        tm = team[possessor]
        gx = goal_x[tm]
        to_goal = math.hypot(gx - ball[0], W / 2 - ball[1])
        if to_goal <= config.shot_range and rng.random() < config.shot_probability:
            aim = np.array([gx, W / 2 + rng.uniform(-3.2, 3.2)])
            d = aim - ball
            speed = rng.uniform(*config.shot_speed)
            flight_dir = d / np.linalg.norm(d)
            ball_vel = flight_dir * speed
            receiver = keeper[1 - tm]
            target = np.array([gx + (1.0 if gx == 0 else -1.0), aim[1]])
            labels.append(EventLabel(f, "shot"))
            log.append(PossessionEntry(f, "shot", ids[possessor], ids[receiver]))
        else:
            mates = np.flatnonzero((team == tm) & (np.arange(n_all) != possessor))
            dist = np.linalg.norm(pos[mates] - ball, axis=1)
            ok = mates[(dist >= config.pass_distance[0]) & (dist <= config.pass_distance[1])]
            if len(ok) == 0:
                decide_at = f + 10
                return
            sgn = 1.0 if tm == 0 else -1.0
            weight = np.exp(0.05 * sgn * (pos[ok, 0] - ball[0]))
            intended = int(rng.choice(ok, p=weight / weight.sum()))
            d_len = float(np.linalg.norm(pos[intended] - ball))
            speed = max(rng.uniform(*config.pass_speed), config.ball_drag * d_len * 1.6)
            speed = min(speed, config.pass_speed[1])
            t_fly = d_len / speed * 1.2
            target = _clamp(pos[intended] + vel[intended] * t_fly * 0.5, inner_lo, inner_hi)
            receiver = intended
            if rng.random() < config.interception_probability:
                opp = np.flatnonzero(team != tm)
                od = np.linalg.norm(pos[opp] - target, axis=1)
                far = np.linalg.norm(pos[opp] - ball, axis=1) > 3.0
                if far.any():
                    receiver = int(opp[far][np.argmin(od[far])])
            d = target - ball
            flight_dir = d / max(np.linalg.norm(d), 1e-9)
            ball_vel = flight_dir * speed
            labels.append(EventLabel(f, "pass"))
            log.append(PossessionEntry(f, "pass", ids[possessor], ids[receiver]))
        phase, flight_start = "flight", f

    for f in range(frames):
        # ---- player targets
        shift = np.array([0.45 * (ball[0] - L / 2), 0.3 * (ball[1] - W / 2)])
        refresh = wander_until <= f
        if refresh.any():
            wander[refresh] = rng.uniform(-6, 6, size=(int(refresh.sum()), 2))
            wander_until[refresh] = f + rng.integers(60, 150, size=int(refresh.sum()))
        goal_tgt = _clamp(anchors + shift + wander, inner_lo, inner_hi)
        speed_cap = np.full(n_all, config.max_player_speed * 0.6)
        for tm, k in keeper.items():
            gk_y = min(max(ball[1], W / 2 - 4), W / 2 + 4)
            goal_tgt[k] = [own_x[tm] + (1.5 if own_x[tm] == 0 else -1.5), gk_y]
        if phase == "control":
            nxt = pos[possessor] + dribble_dir * 5.0
            if not (inner_lo + 3 <= nxt).all() or not (nxt <= inner_hi - 3).all():
                dribble_dir = np.array([L / 2, W / 2]) - pos[possessor]
                dribble_dir /= max(np.linalg.norm(dribble_dir), 1e-9)
            goal_tgt[possessor] = pos[possessor] + dribble_dir * 5.0
            speed_cap[possessor] = dribble_speed
        else:
            passed = float(np.dot(ball - target, flight_dir)) > 0
            slow = float(np.linalg.norm(ball_vel)) < 2.0
            goal_tgt[receiver] = ball if (passed or slow) else target
            speed_cap[receiver] = config.max_player_speed

        # ---- player kinematics: steer, smooth, cap speed
        desired = (goal_tgt - pos) * 1.5
        dn = np.linalg.norm(desired, axis=1)
        desired *= np.minimum(1.0, speed_cap / np.maximum(dn, 1e-9))[:, None]
        vel += (desired - vel) * min(1.0, 4.0 * dt)
        vn = np.linalg.norm(vel, axis=1)
        vel *= np.minimum(1.0, config.max_player_speed / np.maximum(vn, 1e-9))[:, None]
        pos = _clamp(pos + vel * dt, lo, hi)

        # ---- ball
        if phase == "control":
            heading = vel[possessor]
            hn = float(np.linalg.norm(heading))
            foot = pos[possessor] + (heading / hn * 0.4 if hn > 0.2 else 0.0)
            ball = ball + 0.3 * (foot - ball)
            ball_vel = np.zeros(2)
        else:
            ball_vel = ball_vel * math.exp(-config.ball_drag * dt)
            nb = ball + ball_vel * dt
            clamped = _clamp(nb, lo, hi)
            ball_vel[clamped != nb] = 0.0
            ball = clamped
        out[f, 0] = ball
        out[f, 1:] = pos

        # ---- events
        if phase == "flight" and f > flight_start:
            if np.linalg.norm(ball - pos[receiver]) <= config.control_radius:
                labels.append(EventLabel(f, "reception"))
                log.append(PossessionEntry(f, "reception", ids[receiver]))
                start_control(receiver, f)
        elif phase == "control" and f >= decide_at:
            kick(f)

    present = np.ones(frames, dtype=bool)
    fr = np.arange(frames)
    tracks = [ObjectTrack("ball", "ball", fr, out[:, 0, 0], out[:, 0, 1], present)]
    for j, oid in enumerate(ids):
        side = "home" if team[j] == 0 else "away"
        tracks.append(ObjectTrack(oid, "player", fr, out[:, j + 1, 0], out[:, j + 1, 1], present, side))
    traj = MatchTrajectories(config.pitch, config.fps, tuple(tracks), frames, match_id)
    return SimMatch(traj, labels, log)


def generate_many(config: SimConfig, count: int) -> list[SimMatch]:
    """Independent matches; match ``i`` uses a stream spawned from the master seed."""
    seeds = np.random.SeedSequence(config.seed).spawn(count)
    out = []
    for i, ss in enumerate(seeds):
        sub_seed = int(ss.generate_state(1)[0])
        out.append(generate(_with_seed(config, sub_seed), match_id=f"m{i:03d}"))
    return out


def _with_seed(config: SimConfig, seed: int) -> SimConfig:
    return replace(config, seed=seed)


def train_test_split(
    match_ids: list[str], ratios: tuple[int, int, int], seed: int
) -> tuple[list[str], list[str], list[str]]:
    """Split ids into disjoint (train, validation, test) lists.

    ``ratios`` are relative weights; sizes are rounded so they sum to the
    number of matches, each split getting at least one.
    """
    if len(match_ids) < 3:
        raise ValueError("need at least 3 matches to split")
    if len(set(match_ids)) != len(match_ids):
        raise ValueError("match ids must be unique")
    total = sum(ratios)
    n = len(match_ids)
    val = max(1, round(n * ratios[1] / total))
    test = max(1, round(n * ratios[2] / total))
    train = n - val - test
    if train < 1:
        raise ValueError(f"ratios {ratios} leave no training matches out of {n}")
    order = np.random.default_rng(seed).permutation(sorted(match_ids))
    ids = [str(i) for i in order]
    return sorted(ids[:train]), sorted(ids[train : train + val]), sorted(ids[train + val :])
