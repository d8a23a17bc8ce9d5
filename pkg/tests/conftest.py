from __future__ import annotations

import sys

import numpy as np
import pytest

from trajdet.trajstore import MatchTrajectories, ObjectTrack, PitchSpec


def make_match(ball_xy, players: dict, frame_count=None, pitch=PitchSpec(), match_id="t") -> MatchTrajectories:
    """Match from dense arrays; NaN coordinates mean absent."""
    ball_xy = np.asarray(ball_xy, dtype=float)
    n = len(ball_xy) if frame_count is None else frame_count

    def track(oid, kind, xy, team=None):
        xy = np.asarray(xy, dtype=float)
        ok = ~np.isnan(xy).any(axis=1)
        fr = np.flatnonzero(ok)
        return ObjectTrack(oid, kind, fr, xy[ok, 0], xy[ok, 1], np.ones(len(fr), bool), team)

    tracks = [track("ball", "ball", ball_xy)]
    tracks += [track(pid, "player", xy, "home") for pid, xy in players.items()]
    return MatchTrajectories(pitch, 30.0, tuple(tracks), n, match_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
