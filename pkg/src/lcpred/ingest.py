"""Loading of levelX-style recording CSVs and lane configuration files.

A recording consists of a ``tracks.csv`` (one row per vehicle per frame) and a
``recordingMeta.csv`` (one row describing the recording). Lane geometry and
typing come from a separate JSON lane configuration, keyed by location and
driving direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd

from .errors import MissingColumn, NonMonotoneFrames, ParseError, UnknownLaneId

TRACKS_COLUMNS = [
    "recordingId", "trackId", "frame", "xCenter", "yCenter",
    "xVelocity", "yVelocity", "laneId", "laneletId", "width", "length", "class",
]
META_COLUMNS = ["recordingId", "locationId", "frameRate", "driveSide"]


class LaneType(Enum):
    MAINLINE = "Mainline"
    ON_RAMP = "OnRamp"
    OFF_RAMP = "OffRamp"


class DriveSide(Enum):
    RIGHT = "Right"
    LEFT = "Left"


class VehicleClass(Enum):
    CAR = "Car"
    TRUCK = "Truck"
    OTHER = "Other"


@dataclass(frozen=True)
class DirectionConfig:
    """Lane layout for one direction of travel at one location.

    ``lane_ids`` are ordered inside (next to the divider) to outside, and
    ``lane_centers`` hold the corresponding Frenet lateral offsets, which are
    strictly monotone across the ordering. ``svm_lane_ids`` names the two
    innermost lanes (one per direction of travel) whose trajectory points are
    used to fit the dividing-line SVM.
    """

    direction: str
    lane_ids: tuple
    lane_centers: tuple
    lane_width: float
    svm_lane_ids: tuple

    def __post_init__(self):
        diffs = np.diff(self.lane_centers)
        if len(diffs) and not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ParseError(f"direction {self.direction!r}: lane centers are not strictly monotone")
        if len(self.svm_lane_ids) != 2:
            raise ParseError(f"direction {self.direction!r}: expected exactly 2 SVM lane ids")

    def lane_index(self, lane_id) -> int:
        try:
            return self.lane_ids.index(lane_id)
        except ValueError:
            raise UnknownLaneId(lane_id) from None

    def center_of(self, lane_id) -> float:
        return self.lane_centers[self.lane_index(lane_id)]

    def nearest_lane_index(self, l: float) -> int:
        """Index of the lane whose center is closest to lateral offset ``l``."""
        centers = np.asarray(self.lane_centers)
        return int(np.argmin(np.abs(centers - l)))

    def mirrored(self) -> "DirectionConfig":
        """The same layout with all lateral offsets negated (drive-side flip)."""
        return DirectionConfig(
            direction=self.direction,
            lane_ids=self.lane_ids,
            lane_centers=tuple(-c for c in self.lane_centers),
            lane_width=self.lane_width,
            svm_lane_ids=self.svm_lane_ids,
        )


@dataclass(frozen=True)
class LaneConfig:
    """Per-location lane typing and per-direction lane layout."""

    location_id: str
    lane_types: dict
    directions: dict = field(default_factory=dict)

    def lane_type(self, lane_id) -> LaneType:
        try:
            return self.lane_types[lane_id]
        except KeyError:
            raise UnknownLaneId(lane_id) from None

    def is_ramp(self, lane_id) -> bool:
        return self.lane_type(lane_id) in (LaneType.ON_RAMP, LaneType.OFF_RAMP)

    def direction(self, name: str) -> DirectionConfig:
        return self.directions[name]


def load_lane_config(path) -> dict:
    """Parse a lane-configuration JSON file into ``{location_id: LaneConfig}``."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    configs = {}
    for loc_id, loc in raw.items():
        lane_types = {int(k): LaneType(v) for k, v in loc["laneTypes"].items()}
        directions = {}
        for dir_name, d in loc.get("directions", {}).items():
            directions[dir_name] = DirectionConfig(
                direction=dir_name,
                lane_ids=tuple(int(i) for i in d["laneIds"]),
                lane_centers=tuple(float(c) for c in d["laneCenters"]),
                lane_width=float(d["laneWidth"]),
                svm_lane_ids=tuple(int(i) for i in d["svmLaneIds"]),
            )
        configs[loc_id] = LaneConfig(location_id=loc_id, lane_types=lane_types, directions=directions)
    return configs


@dataclass
class Track:
    """One vehicle's trajectory, stored as parallel per-frame arrays.

    ``lanelet_ids[i]`` is a tuple of lanelet ids the vehicle occupies at frame
    ``i`` (more than one means partial occupancy of several lanelets).
    """

    track_id: int
    frames: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    lane_id: np.ndarray
    lanelet_ids: list
    width: float
    length: float
    vehicle_class: VehicleClass

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ParseError(f"track {self.track_id}: empty")
        if self.width <= 0 or self.length <= 0:
            raise ParseError(f"track {self.track_id}: non-positive extent")
        d = np.diff(self.frames)
        if len(d) and not np.all(d == 1):
            raise NonMonotoneFrames(self.track_id)
        for arr in (self.x, self.y, self.vx, self.vy):
            if not np.all(np.isfinite(arr)):
                raise ParseError(f"track {self.track_id}: non-finite coordinate")

    def __len__(self):
        return len(self.frames)


@dataclass
class RecordingBundle:
    recording_id: int
    frequency_hz: float
    location_id: str
    drive_side: DriveSide
    tracks: list

    def __post_init__(self):
        if self.frequency_hz <= 0:
            raise ParseError("frequency must be positive")

    def track(self, track_id: int) -> Track:
        for t in self.tracks:
            if t.track_id == track_id:
                return t
        raise KeyError(track_id)


def _parse_lanelet_cell(cell) -> tuple:
    # multi-lanelet occupancy is encoded as ';'-separated ids in one cell
    if cell is None or (isinstance(cell, float) and np.isnan(cell)):
        return ()
    text = str(cell).strip()
    if not text:
        return ()
    return tuple(int(float(part)) for part in text.split(";"))


def load_recording(tracks_path, meta_path, lane_config: dict) -> RecordingBundle:
    """Load one recording into memory, validating schema and frame continuity.

    ``lane_config`` maps location ids to :class:`LaneConfig`; every lane id in
    the tracks file must be known to the location's configuration.
    """
    meta = pd.read_csv(meta_path, dtype=str)
    for col in META_COLUMNS:
        if col not in meta.columns:
            raise MissingColumn(col, meta_path)
    if len(meta) != 1:
        raise ParseError(f"{meta_path}: expected exactly one recording row, got {len(meta)}")
    row = meta.iloc[0]
    recording_id = int(row["recordingId"])
    location_id = str(row["locationId"])
    frequency = float(row["frameRate"])
    drive_side = DriveSide(row["driveSide"])
    if location_id not in lane_config:
        raise ParseError(f"location {location_id!r} not present in lane configuration")
    lanes = lane_config[location_id]

    df = pd.read_csv(tracks_path, dtype=str)
    for col in TRACKS_COLUMNS:
        if col not in df.columns:
            raise MissingColumn(col, tracks_path)

    numeric = {}
    for col in ("trackId", "frame", "xCenter", "yCenter", "xVelocity", "yVelocity",
                "laneId", "width", "length"):
        converted = pd.to_numeric(df[col], errors="coerce")
        bad = converted.isna() & df[col].notna()
        if bad.any():
            idx = int(np.flatnonzero(bad.to_numpy())[0])
            raise ParseError(f"{tracks_path}: unparseable {col!r} at data row {idx}: {df[col].iloc[idx]!r}")
        if converted.isna().any():
            idx = int(np.flatnonzero(converted.isna().to_numpy())[0])
            raise ParseError(f"{tracks_path}: missing {col!r} at data row {idx}")
        numeric[col] = converted.to_numpy()

    tracks = []
    track_ids = numeric["trackId"].astype(int)
    order = np.argsort(track_ids, kind="stable")
    df_lanelet = df["laneletId"].to_numpy()
    df_class = df["class"].to_numpy()
    for tid in np.unique(track_ids):
        sel = order[track_ids[order] == tid]
        frames = numeric["frame"][sel].astype(int)
        frame_order = np.argsort(frames, kind="stable")
        sel = sel[frame_order]
        lane_ids = numeric["laneId"][sel].astype(int)
        for lid in np.unique(lane_ids):
            lanes.lane_type(int(lid))  # raises UnknownLaneId
        lanelets = [_parse_lanelet_cell(df_lanelet[i]) for i in sel]
        for cell in lanelets:
            for lid in cell:
                lanes.lane_type(int(lid))
        tracks.append(Track(
            track_id=int(tid),
            frames=numeric["frame"][sel].astype(int),
            x=numeric["xCenter"][sel].astype(float),
            y=numeric["yCenter"][sel].astype(float),
            vx=numeric["xVelocity"][sel].astype(float),
            vy=numeric["yVelocity"][sel].astype(float),
            lane_id=lane_ids,
            lanelet_ids=lanelets,
            width=float(numeric["width"][sel][0]),
            length=float(numeric["length"][sel][0]),
            vehicle_class=VehicleClass(df_class[sel[0]]),
        ))

    return RecordingBundle(
        recording_id=recording_id,
        frequency_hz=frequency,
        location_id=location_id,
        drive_side=drive_side,
        tracks=tracks,
    )


def ramp_exclusion_mask(track: Track, lane_config: LaneConfig) -> np.ndarray:
    """True at frames where the vehicle is fully or partially on a ramp lane.

    Partial occupancy is decided from the frame's lanelet-id set: any ramp
    lanelet in the set triggers exclusion. Excluded frames carry no prediction
    target, but the track remains usable as a neighbor.
    """
    mask = np.zeros(len(track), dtype=bool)
    for i in range(len(track)):
        if lane_config.is_ramp(int(track.lane_id[i])):
            mask[i] = True
            continue
        for lid in track.lanelet_ids[i]:
            if lane_config.is_ramp(int(lid)):
                mask[i] = True
                break
    return mask
