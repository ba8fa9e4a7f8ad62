"""Neighbor-slot assignment tests, pinned to a brute-force oracle."""

import numpy as np
import pytest

from lcpred.frenet import FrenetState
from lcpred.ingest import DirectionConfig, LaneConfig, LaneType
from lcpred.scene import (SLOTS, CandidateState, assign_neighbors,
                          double_alongside_invalid, validate_scene)

DCFG = DirectionConfig(direction="dir1", lane_ids=(10, 11, 12, 19),
                       lane_centers=(-2.375, -6.125, -9.875, -13.625),
                       lane_width=3.75, svm_lane_ids=(10, 20))
LANES = LaneConfig(location_id="loc", lane_types={
    10: LaneType.MAINLINE, 11: LaneType.MAINLINE, 12: LaneType.MAINLINE,
    19: LaneType.ON_RAMP}, directions={"dir1": DCFG})


def _cand(tid, s, l, lane_id=10, length=4.5, l_dot=0.0, s_dot=25.0):
    return CandidateState(track_id=tid,
                          state=FrenetState(s=s, l=l, s_dot=s_dot,
                                            l_dot=l_dot, ref_index=0),
                          length=length, lane_id=lane_id)


def _oracle(cands, target_id, ramp_limit=6.0):
    """Straightforward re-derivation of the slot assignment rules."""
    centers = np.sort(np.asarray(DCFG.lane_centers))
    target = next(c for c in cands if c.track_id == target_id)
    t_band = int(np.argmin(np.abs(centers - target.state.l)))
    slots = {s: None for s in SLOTS}
    alongside = [0, 0]
    for c in cands:
        if c.track_id == target_id:
            continue
        if c.lane_id == 19 and abs(c.state.l - target.state.l) > ramp_limit:
            continue
        band = int(np.argmin(np.abs(centers - c.state.l))) - t_band
        if band not in (-1, 0, 1):
            continue
        ds = c.state.s - target.state.s
        over = abs(ds) <= (target.length + c.length) / 2
        if band == 0:
            if over:
                continue
            slot = "p" if ds > 0 else "f"
        else:
            side = "l" if band == 1 else "r"
            if over:
                alongside[0 if side == "l" else 1] += 1
                slot = side + "a"
            else:
                slot = side + ("p" if ds > 0 else "f")
        cur = slots[slot]
        if (cur is None or abs(ds) < cur[0]
                or (abs(ds) == cur[0] and c.track_id < cur[1])):
            slots[slot] = (abs(ds), c.track_id)
    return ({k: (v[1] if v else None) for k, v in slots.items()},
            tuple(alongside))


def test_basic_slots():
    cands = [
        _cand(1, 100.0, -6.1, 11),            # target, middle lane
        _cand(2, 130.0, -6.0, 11),            # preceding
        _cand(3, 70.0, -6.2, 11),             # following
        _cand(4, 101.0, -2.4, 10),            # left alongside
        _cand(5, 140.0, -9.9, 12),            # right preceding
        _cand(6, 60.0, -9.8, 12),             # right following
    ]
    scene = assign_neighbors(cands, 1, LANES, DCFG, frame=0)
    got = {k: (v[0] if v else None) for k, v in scene.neighbors.items()}
    assert got == {"p": 2, "f": 3, "la": 4, "rp": 5, "rf": 6,
                   "lp": None, "lf": None, "ra": None}


def test_nearest_candidate_wins_each_slot():
    cands = [
        _cand(1, 100.0, -6.1, 11),
        _cand(2, 130.0, -6.0, 11),
        _cand(3, 115.0, -6.0, 11),  # closer preceding
    ]
    scene = assign_neighbors(cands, 1, LANES, DCFG, frame=0)
    assert scene.neighbors["p"][0] == 3


def test_same_lane_overlap_gets_no_slot():
    cands = [_cand(1, 100.0, -6.1, 11), _cand(2, 103.0, -6.0, 11)]
    scene = assign_neighbors(cands, 1, LANES, DCFG, frame=0)
    assert all(v is None for v in scene.neighbors.values())


def test_two_lanes_away_ignored():
    cands = [_cand(1, 100.0, -2.4, 10), _cand(2, 100.0, -9.9, 12)]
    scene = assign_neighbors(cands, 1, LANES, DCFG, frame=0)
    assert all(v is None for v in scene.neighbors.values())


def test_ramp_candidate_lateral_limit():
    target = _cand(1, 100.0, -9.9, 12)
    near_ramp = _cand(2, 120.0, -13.6, 19)    # 3.7 m away: admitted
    scene = assign_neighbors([target, near_ramp], 1, LANES, DCFG, frame=0)
    assert scene.neighbors["rp"][0] == 2
    far_target = _cand(1, 100.0, -6.1, 11)    # 7.5 m from the ramp: dropped
    scene = assign_neighbors([far_target, near_ramp], 1, LANES, DCFG, frame=0)
    assert all(v is None for v in scene.neighbors.values())


def test_double_alongside_invalidates():
    cands = [
        _cand(1, 100.0, -6.1, 11),
        _cand(2, 99.0, -2.4, 10),
        _cand(3, 102.0, -2.3, 10),
    ]
    scene = validate_scene(assign_neighbors(cands, 1, LANES, DCFG, frame=0))
    assert not scene.valid
    assert scene.alongside_counts == (2, 0)


def test_randomized_scenes_match_oracle():
    rng = np.random.default_rng(12)
    for trial in range(200):
        n = rng.integers(2, 12)
        cands = []
        for tid in range(1, n + 1):
            lane = int(rng.choice((10, 11, 12, 19)))
            center = DCFG.lane_centers[DCFG.lane_ids.index(lane)]
            cands.append(_cand(
                tid, s=float(rng.uniform(0, 60)),
                l=center + float(rng.uniform(-1.0, 1.0)),
                lane_id=lane, length=float(rng.uniform(3.5, 12.0))))
        target_id = int(rng.integers(1, n + 1))
        scene = assign_neighbors(cands, target_id, LANES, DCFG, frame=trial)
        got = {k: (v[0] if v else None) for k, v in scene.neighbors.items()}
        want, alongside = _oracle(cands, target_id)
        assert got == want, f"trial {trial}"
        assert scene.alongside_counts == alongside


def test_vectorized_validity_matches_per_target_scenes():
    rng = np.random.default_rng(7)
    for trial in range(100):
        n = int(rng.integers(3, 14))
        lanes = rng.choice((10, 11, 12, 19), size=n)
        centers = np.array([DCFG.lane_centers[DCFG.lane_ids.index(int(k))]
                            for k in lanes])
        l = centers + rng.uniform(-1.0, 1.0, n)
        s = rng.uniform(0, 80, n)
        length = rng.uniform(3.5, 12.0, n)
        cands = [_cand(i + 1, float(s[i]), float(l[i]), int(lanes[i]),
                       float(length[i])) for i in range(n)]
        flags = double_alongside_invalid(l, s, length, lanes == 19, DCFG)
        for i in range(n):
            scene = validate_scene(
                assign_neighbors(cands, i + 1, LANES, DCFG, frame=0))
            assert flags[i] == (not scene.valid), f"trial {trial} vehicle {i}"


def test_missing_target_raises():
    with pytest.raises(ValueError):
        assign_neighbors([_cand(1, 0.0, -6.0, 11)], 99, LANES, DCFG, frame=0)
