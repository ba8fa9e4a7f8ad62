"""Lane-change instant detection and labeled window extraction.

An LC instant is the frame at which the vehicle center crosses from one lane
band into another. Each instant yields at most one observation window ending
a uniformly drawn prediction time before the crossing; each track additionally
yields at most one lane-keeping window.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .frenet import FrenetTrack
from .ingest import DirectionConfig

DELTA_T_OBSERVE = 2.0    # s, observation window length
DELTA_T_PRED_MAX = 4.0   # s, maximum prediction time
DEFAULT_MAX_DRAWS = 10   # prediction-time draws per instant before giving up


class Label(IntEnum):
    LK = 0
    LLC = 1
    RLC = 2


class Direction(IntEnum):
    LEFT = 0
    RIGHT = 1


@dataclass(frozen=True)
class LcInstant:
    track_id: int
    frame: int
    direction: Direction


@dataclass(frozen=True)
class Segment:
    track_id: int
    start_frame: int
    end_frame: int  # inclusive
    label: Label
    prediction_time: float | None  # s, LC segments only
    dataset_tag: str = ""

    def __len__(self):
        return self.end_frame - self.start_frame + 1


def lane_band_indices(l: np.ndarray, dcfg: DirectionConfig) -> np.ndarray:
    """Per-frame index of the nearest lane center, in ascending-center order.

    A higher index means further to the left of the direction of travel
    (positive Frenet l is left of the path tangent).
    """
    centers = np.sort(np.asarray(dcfg.lane_centers, dtype=float))
    return np.argmin(np.abs(centers[None, :] - np.asarray(l)[:, None]), axis=1)


def detect_lc_instants(ftrack: FrenetTrack, dcfg: DirectionConfig) -> list:
    """One instant per lane-band transition of the vehicle center.

    Transitions touching a gated frame are ignored: a gated frame has no
    reliable lateral coordinate, so a band change there is an artifact of the
    conversion, not a crossing.
    """
    bands = lane_band_indices(ftrack.l, dcfg)
    out = []
    for i in range(1, len(bands)):
        if ftrack.gated[i] or ftrack.gated[i - 1]:
            continue
        if bands[i] != bands[i - 1]:
            direction = Direction.LEFT if bands[i] > bands[i - 1] else Direction.RIGHT
            out.append(LcInstant(
                track_id=ftrack.track_id,
                frame=int(ftrack.frames[i]),
                direction=direction,
            ))
    return out


def _window_ok(ftrack: FrenetTrack, foi_mask: np.ndarray, instant_frames: np.ndarray,
               start: int, end: int) -> bool:
    f0 = int(ftrack.frames[0])
    if start < f0 or end > int(ftrack.frames[-1]):
        return False
    if not foi_mask[start - f0:end - f0 + 1].all():
        return False
    if len(instant_frames):
        if np.any((instant_frames >= start) & (instant_frames <= end)):
            return False
    return True


def cut_lc_segment(ftrack: FrenetTrack, foi_mask: np.ndarray, instants: list,
                   instant: LcInstant, frequency_hz: float, rng,
                   delta_t_o: float = DELTA_T_OBSERVE,
                   delta_t_p_max: float = DELTA_T_PRED_MAX,
                   max_draws: int = DEFAULT_MAX_DRAWS,
                   dataset_tag: str = "") -> Segment | None:
    """Cut one labeled observation window preceding an LC instant.

    Draws the prediction time uniformly from [0, delta_t_p_max]; draws whose
    window would be infeasible (out of track, gated frames, or containing any
    LC instant) are redrawn up to ``max_draws`` times before giving up.
    """
    n = int(round(delta_t_o * frequency_hz))
    instant_frames = np.asarray([i.frame for i in instants], dtype=int)
    for _ in range(max(1, max_draws)):
        dt_p = float(rng.uniform(0.0, delta_t_p_max))
        end = instant.frame - int(round(dt_p * frequency_hz))
        start = end - n + 1
        if _window_ok(ftrack, foi_mask, instant_frames, start, end):
            label = Label.LLC if instant.direction == Direction.LEFT else Label.RLC
            return Segment(
                track_id=ftrack.track_id, start_frame=start, end_frame=end,
                label=label, prediction_time=dt_p, dataset_tag=dataset_tag,
            )
    return None


def admissible_lk_windows(ftrack: FrenetTrack, foi_mask: np.ndarray, instants: list,
                          frequency_hz: float,
                          delta_t_o: float = DELTA_T_OBSERVE,
                          delta_t_p_max: float = DELTA_T_PRED_MAX) -> np.ndarray:
    """Start frames of every admissible lane-keeping window on the track."""
    n = int(round(delta_t_o * frequency_hz))
    horizon = int(round(delta_t_p_max * frequency_hz))
    m = len(ftrack)
    if m < n:
        return np.zeros(0, dtype=int)
    f0 = int(ftrack.frames[0])
    ok = np.ones(m - n + 1, dtype=bool)
    # all frames of interest
    run = np.convolve(foi_mask.astype(int), np.ones(n, dtype=int), mode="valid")
    ok &= run == n
    instant_frames = np.sort(np.asarray([i.frame for i in instants], dtype=int))
    if len(instant_frames):
        starts = np.arange(m - n + 1) + f0
        ends = starts + n - 1
        # window must not contain an instant and must not end within the
        # prediction horizon before one
        contains = np.searchsorted(instant_frames, ends + horizon, side="right") \
            - np.searchsorted(instant_frames, starts, side="left")
        ok &= contains == 0
    return np.flatnonzero(ok) + f0


def sample_lk_segment(ftrack: FrenetTrack, foi_mask: np.ndarray, instants: list,
                      frequency_hz: float, rng,
                      delta_t_o: float = DELTA_T_OBSERVE,
                      delta_t_p_max: float = DELTA_T_PRED_MAX,
                      dataset_tag: str = "") -> Segment | None:
    """Pick one admissible lane-keeping window uniformly at random."""
    starts = admissible_lk_windows(ftrack, foi_mask, instants, frequency_hz,
                                   delta_t_o, delta_t_p_max)
    if len(starts) == 0:
        return None
    n = int(round(delta_t_o * frequency_hz))
    start = int(starts[rng.integers(0, len(starts))])
    return Segment(
        track_id=ftrack.track_id, start_frame=start, end_frame=start + n - 1,
        label=Label.LK, prediction_time=None, dataset_tag=dataset_tag,
    )


def save_segments_csv(path, segments) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["datasetTag", "trackId", "startFrame", "endFrame", "label", "predTime"])
        for seg in segments:
            w.writerow([
                seg.dataset_tag, seg.track_id, seg.start_frame, seg.end_frame,
                seg.label.name,
                "" if seg.prediction_time is None else "%.17g" % seg.prediction_time,
            ])


def load_segments_csv(path) -> list:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.append(Segment(
                track_id=int(row["trackId"]),
                start_frame=int(row["startFrame"]),
                end_frame=int(row["endFrame"]),
                label=Label[row["label"]],
                prediction_time=float(row["predTime"]) if row["predTime"] else None,
                dataset_tag=row["datasetTag"],
            ))
    return out
