"""Surrounding-vehicle assignment for a target vehicle at one frame.

Up to eight neighbor slots are filled: preceding (p), following (f), and the
left/right preceding, alongside, and following vehicles (lp, la, lf, rp, ra,
rf). Lane membership is decided from lateral bands around the configured lane
centers; "alongside" means the longitudinal extents overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frenet import FrenetState
from .ingest import DirectionConfig, LaneConfig

SLOTS = ("p", "f", "lp", "la", "lf", "rp", "ra", "rf")
RAMP_LATERAL_LIMIT = 6.0  # m; ramp vehicles beyond this are ignored
DOUBLE_ALONGSIDE = "DoubleAlongside"


@dataclass(frozen=True)
class CandidateState:
    track_id: int
    state: FrenetState
    length: float
    lane_id: int | None = None  # raw lane id, used only for ramp typing


@dataclass
class SceneFrame:
    target_id: int
    frame: int
    target: FrenetState
    target_length: float
    neighbors: dict = field(default_factory=dict)  # slot -> (track_id, FrenetState) | None
    valid: bool = True
    invalid_reason: str | None = None
    alongside_counts: tuple = (0, 0)  # (left, right)

    def __post_init__(self):
        for slot in SLOTS:
            self.neighbors.setdefault(slot, None)


def _sorted_centers(dcfg: DirectionConfig):
    centers = np.asarray(dcfg.lane_centers, dtype=float)
    order = np.argsort(centers)
    return centers[order]


def _band_offset(sorted_centers: np.ndarray, target_l: float, cand_l: float) -> int | None:
    """Relative lane position of the candidate: +1 left, 0 same, -1 right.

    Positive Frenet l is to the left of the direction of travel, so the left
    neighbor lane is the next center above the target's. Anything further than
    one lane away gets no slot.
    """
    ti = int(np.argmin(np.abs(sorted_centers - target_l)))
    ci = int(np.argmin(np.abs(sorted_centers - cand_l)))
    d = ci - ti
    if d in (-1, 0, 1):
        return d
    return None


def _overlaps(target: FrenetState, target_len: float, cand: FrenetState, cand_len: float) -> bool:
    return abs(cand.s - target.s) <= (target_len + cand_len) / 2.0


def assign_neighbors(all_states_at_frame, target_id: int, lane_config: LaneConfig,
                     dcfg: DirectionConfig, frame: int = 0,
                     ramp_lateral_limit: float = RAMP_LATERAL_LIMIT) -> SceneFrame:
    """Build the scene around ``target_id`` from all vehicles present at a frame.

    ``all_states_at_frame`` is a list of :class:`CandidateState` sharing one
    reference path. The nearest admissible candidate per slot wins; empty
    slots are legal.
    """
    target = None
    for cand in all_states_at_frame:
        if cand.track_id == target_id:
            target = cand
            break
    if target is None:
        raise ValueError(f"target {target_id} not present at frame {frame}")

    centers = _sorted_centers(dcfg)
    scene = SceneFrame(
        target_id=target_id, frame=frame,
        target=target.state, target_length=target.length,
    )
    best = {slot: None for slot in SLOTS}  # slot -> (key, track_id, state)
    alongside_left = 0
    alongside_right = 0

    for cand in all_states_at_frame:
        if cand.track_id == target_id:
            continue
        st = cand.state
        if cand.lane_id is not None and lane_config.is_ramp(cand.lane_id):
            if abs(st.l - target.state.l) > ramp_lateral_limit:
                continue
        band = _band_offset(centers, target.state.l, st.l)
        if band is None:
            continue
        ds = st.s - target.state.s
        alongside = _overlaps(target.state, target.length, st, cand.length)
        if band == 0:
            if alongside:
                continue  # same-lane overlap has no slot
            slot = "p" if ds > 0 else "f"
        else:
            side = "l" if band == 1 else "r"
            if alongside:
                if side == "l":
                    alongside_left += 1
                else:
                    alongside_right += 1
                slot = side + "a"
            else:
                slot = side + ("p" if ds > 0 else "f")
        key = abs(ds)
        cur = best[slot]
        if cur is None or key < cur[0] or (key == cur[0] and cand.track_id < cur[1]):
            best[slot] = (key, cand.track_id, st)

    for slot, entry in best.items():
        if entry is not None:
            scene.neighbors[slot] = (entry[1], entry[2])
    scene.alongside_counts = (alongside_left, alongside_right)
    return scene


def validate_scene(scene: SceneFrame) -> SceneFrame:
    """Flag scenes with two or more alongside vehicles on one side as invalid.

    Such target frames are dropped from prediction, but the target itself
    still serves as a neighbor in other vehicles' scenes.
    """
    left, right = scene.alongside_counts
    if left >= 2 or right >= 2:
        scene.valid = False
        scene.invalid_reason = DOUBLE_ALONGSIDE
    else:
        scene.valid = True
        scene.invalid_reason = None
    return scene


def double_alongside_invalid(l: np.ndarray, s: np.ndarray, length: np.ndarray,
                             is_ramp: np.ndarray, dcfg: DirectionConfig,
                             ramp_lateral_limit: float = RAMP_LATERAL_LIMIT) -> np.ndarray:
    """Vectorized scene-validity test for every vehicle at one frame.

    Returns a boolean array, True where the vehicle's scene is invalid due to
    a double-alongside condition. Matches assign_neighbors + validate_scene.
    """
    n = len(l)
    if n == 0:
        return np.zeros(0, dtype=bool)
    centers = _sorted_centers(dcfg)
    lane_idx = np.argmin(np.abs(centers[None, :] - l[:, None]), axis=1)
    ds = s[None, :] - s[:, None]                      # ds[i, j] = s_j - s_i
    overlap = np.abs(ds) <= (length[None, :] + length[:, None]) / 2.0
    band = lane_idx[None, :] - lane_idx[:, None]
    admitted = (~is_ramp[None, :]) | (np.abs(l[None, :] - l[:, None]) <= ramp_lateral_limit)
    off_diag = ~np.eye(n, dtype=bool)
    left_alongside = overlap & (band == 1) & admitted & off_diag
    right_alongside = overlap & (band == -1) & admitted & off_diag
    return (left_alongside.sum(axis=1) >= 2) | (right_alongside.sum(axis=1) >= 2)
