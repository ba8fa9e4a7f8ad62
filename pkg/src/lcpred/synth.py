"""Synthetic two-population highway recordings in the levelX tracks schema.

Vehicles follow lane centers with Ornstein-Uhlenbeck lateral jitter.
Scheduled lane changes run a quintic lateral profile of configurable duration
preceded by a small direction-coded lateral drift and a longitudinal speed
adjustment, so the intention is observable inside the prediction horizon.
A sidecar file records the ground-truth lane-crossing instants.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidParams

MIN_HEADWAY = 20.0  # m, minimum spawn spacing within a lane

# lane id blocks: direction 1 mainline, its ramp, direction 2 mainline
_DIR1_BASE, _RAMP_ID, _DIR2_BASE = 10, 19, 20


@dataclass(frozen=True)
class PopulationParams:
    tag: str = "pop"
    location_id: str = "loc1"
    recording_id: int = 1
    drive_side: str = "Right"            # "Right" | "Left"
    frequency_hz: float = 25.0
    road: str = "straight"               # "straight" | "arc"
    arc_radius: float = 5000.0           # m, used when road == "arc"
    road_length: float = 2600.0          # m
    n_lanes: int = 3                     # per direction
    lane_width: float = 3.75             # m
    median_gap: float = 0.5              # m, divider to innermost lane edge
    with_ramp: bool = True
    ramp_span: tuple = (200.0, 700.0)    # m, on-ramp extent along the road
    # traffic
    dir1_fraction: float = 0.78
    ramp_fraction: float = 0.05
    track_duration_s: tuple = (40.0, 60.0)
    speed_mean: float = 28.0             # m/s
    speed_std: float = 2.5
    truck_fraction: float = 0.12
    # behavior
    lane_change_duration_s: float = 3.0
    peak_lateral_velocity_mps: float = 2.34
    speed_adjust_gain: float = 0.06
    gap_acceptance_m: float = 30.0
    lc_probability: float = 0.85
    cue_lead_s: float = 4.5              # drift onset before the maneuver start
    cue_drift_m: float = 0.45
    lat_jitter_sigma: float = 0.08       # m, OU stationary std
    lat_jitter_theta: float = 0.6        # 1/s, OU mean reversion
    seed: int = 0

    def validate(self):
        if self.drive_side not in ("Right", "Left"):
            raise InvalidParams(f"unknown drive side {self.drive_side!r}")
        if self.frequency_hz <= 0 or self.lane_width <= 0 or self.road_length <= 0:
            raise InvalidParams("physical parameters must be positive")
        if not (0 < self.lane_change_duration_s < 10.0):
            raise InvalidParams("lane-change duration must be in (0, 10) s")
        if self.road not in ("straight", "arc"):
            raise InvalidParams(f"unknown road geometry {self.road!r}")


def _quintic(u: np.ndarray) -> np.ndarray:
    """Smooth 0 -> 1 ramp with zero first/second derivatives at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return 10 * u ** 3 - 15 * u ** 4 + 6 * u ** 5


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return 3 * u ** 2 - 2 * u ** 3


def lane_layout(params: PopulationParams):
    """(lane ids, road-frame lateral centers, types) for both directions.

    ``side`` is the road-frame sign of the direction-1 carriageway: right-hand
    traffic drives right of the divider (negative y when facing +s).
    """
    w = params.lane_width
    side = -1.0 if params.drive_side == "Right" else 1.0
    offsets = [params.median_gap + w / 2 + i * w for i in range(params.n_lanes)]
    dir1 = {_DIR1_BASE + i: side * offsets[i] for i in range(params.n_lanes)}
    dir2 = {_DIR2_BASE + i: -side * offsets[i] for i in range(params.n_lanes)}
    types = {lid: "Mainline" for lid in list(dir1) + list(dir2)}
    if params.with_ramp:
        dir1[_RAMP_ID] = side * (params.median_gap + w / 2 + params.n_lanes * w)
        types[_RAMP_ID] = "OnRamp"
    return dir1, dir2, types, side


def write_lane_config(params: PopulationParams, path) -> None:
    dir1, dir2, types, side = lane_layout(params)
    # Frenet lateral offsets: l is left-of-travel, so direction 1 sees
    # side * |offset| directly and direction 2 sees the same values.
    def frenet_centers(centers, travel_sign):
        return [travel_sign * c for c in centers]

    d1_ids = sorted(dir1, key=lambda lid: abs(dir1[lid]))
    d2_ids = sorted(dir2, key=lambda lid: abs(dir2[lid]))
    doc = {
        params.location_id: {
            "laneTypes": {str(lid): types[lid] for lid in sorted(types)},
            "directions": {
                "dir1": {
                    "laneIds": d1_ids,
                    "laneCenters": frenet_centers([dir1[lid] for lid in d1_ids], 1.0),
                    "laneWidth": params.lane_width,
                    "svmLaneIds": [_DIR1_BASE, _DIR2_BASE],
                },
                "dir2": {
                    "laneIds": d2_ids,
                    "laneCenters": frenet_centers([dir2[lid] for lid in d2_ids], -1.0),
                    "laneWidth": params.lane_width,
                    "svmLaneIds": [_DIR2_BASE, _DIR1_BASE],
                },
            },
        }
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _road_to_cartesian(params: PopulationParams, s: np.ndarray, y: np.ndarray):
    if params.road == "straight":
        return s.copy(), y.copy()
    r = params.arc_radius
    ang = s / r
    # positive road-frame y is left of +s travel, i.e. toward the arc center
    return (r - y) * np.sin(ang), r - (r - y) * np.cos(ang)


@dataclass
class _Plan:
    track_id: int
    direction: int          # +1: dir1 (increasing s), -1: dir2
    lane_seq: list          # [(start_time, lane_id)]
    t0: float
    t1: float
    s0: float
    speed: float
    length: float
    width: float
    vclass: str
    lc: tuple | None = None  # (t_cross, from_id, to_id)
    from_ramp: bool = False


def generate_population(params: PopulationParams, n_tracks: int, duration_s: float,
                        out_dir) -> dict:
    """Generate one recording and write tracks/meta/lane-config/ground-truth.

    Returns the mapping of artifact names to file paths. Same parameters and
    seed produce byte-identical files.
    """
    params.validate()
    if n_tracks < 1 or duration_s <= 0:
        raise InvalidParams("n_tracks and duration_s must be positive")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(params.seed)
    dir1, dir2, types, side = lane_layout(params)
    freq = params.frequency_hz
    dt = 1.0 / freq

    mainline1 = sorted((lid for lid in dir1 if types[lid] == "Mainline"),
                       key=lambda lid: abs(dir1[lid]))
    mainline2 = sorted(dir2, key=lambda lid: abs(dir2[lid]))
    all_centers = {**dir1, **dir2}

    # --- plan tracks -------------------------------------------------------
    plans = []
    occupancy = {}  # (direction, lane_id) -> list of (t0, t1, s0, speed, direction)
    next_id = 1
    for _ in range(n_tracks):
        direction = 1 if rng.random() < params.dir1_fraction else -1
        from_ramp = bool(direction == 1 and params.with_ramp
                         and rng.random() < params.ramp_fraction)
        dur = rng.uniform(*params.track_duration_s)
        speed = float(np.clip(rng.normal(params.speed_mean, params.speed_std),
                              10.0, 45.0))
        is_truck = rng.random() < params.truck_fraction
        if is_truck:
            speed = min(speed, 24.0)
        dur = min(dur, duration_s)
        t0 = rng.uniform(0.0, duration_s - dur)
        span = speed * dur
        if from_ramp:
            s0 = params.ramp_span[0] + rng.uniform(0.0, 50.0)
            lane0 = _RAMP_ID
        else:
            lanes = mainline1 if direction == 1 else mainline2
            lane0 = int(lanes[rng.integers(0, len(lanes))])
            if direction == 1:
                s0 = rng.uniform(0.0, max(params.road_length - span, 1.0))
            else:
                s0 = rng.uniform(min(span, params.road_length - 1.0), params.road_length)
        # crude spawn-spacing check against same-lane traffic
        ok = True
        for (o0, o1, os0, ov, odir) in occupancy.get((direction, lane0), ()):
            lo, hi = max(t0, o0), min(t0 + dur, o1)
            if lo >= hi:
                continue
            for t in (lo, hi):
                gap = abs((s0 + direction * speed * (t - t0)) - (os0 + odir * ov * (t - o0)))
                if gap < MIN_HEADWAY:
                    ok = False
                    break
            if not ok:
                break
        if not ok:
            continue
        occupancy.setdefault((direction, lane0), []).append((t0, t0 + dur, s0, speed, direction))
        plans.append(_Plan(
            track_id=next_id, direction=direction, lane_seq=[(t0, lane0)],
            t0=t0, t1=t0 + dur, s0=s0, speed=speed,
            length=12.0 if is_truck else rng.uniform(3.8, 5.2),
            width=2.5 if is_truck else rng.uniform(1.7, 2.1),
            vclass="Truck" if is_truck else "Car",
            from_ramp=from_ramp,
        ))
        next_id += 1

    # --- schedule lane changes --------------------------------------------
    d_lc = params.lane_change_duration_s
    lead = params.cue_lead_s
    for plan in plans:
        lanes = mainline1 if plan.direction == 1 else mainline2
        if plan.from_ramp:
            # merge into the outermost mainline lane shortly after entering
            t_cross = plan.t0 + rng.uniform(4.0, 8.0)
            plan.lc = (t_cross, _RAMP_ID, lanes[-1])
            continue
        if rng.random() >= params.lc_probability:
            continue
        margin_before = lead + d_lc / 2 + 7.0
        margin_after = d_lc / 2 + 1.0
        if plan.t1 - plan.t0 < margin_before + margin_after + 1.0:
            continue
        t_cross = rng.uniform(plan.t0 + margin_before, plan.t1 - margin_after)
        lane0 = plan.lane_seq[0][1]
        idx = lanes.index(lane0)
        choices = []
        if idx > 0:
            choices.append(lanes[idx - 1])
        if idx < len(lanes) - 1:
            choices.append(lanes[idx + 1])
        target = int(choices[rng.integers(0, len(choices))])
        plan.lc = (t_cross, lane0, target)

    # gap acceptance: cancel changes into an occupied slot at the crossing time
    for plan in plans:
        if plan.lc is None or plan.from_ramp:
            continue
        t_cross, _, target = plan.lc
        s_self = plan.s0 + plan.direction * plan.speed * (t_cross - plan.t0)
        for other in plans:
            if other.track_id == plan.track_id or other.direction != plan.direction:
                continue
            if not (other.t0 <= t_cross <= other.t1):
                continue
            if other.lane_seq[0][1] != target:
                continue
            s_other = other.s0 + other.direction * other.speed * (t_cross - other.t0)
            if abs(s_other - s_self) < params.gap_acceptance_m:
                plan.lc = None
                break

    # --- roll out trajectories --------------------------------------------
    rows_track = []
    rows_gt = []
    for plan in plans:
        f0 = int(np.ceil(plan.t0 * freq))
        f1 = int(np.floor(plan.t1 * freq))
        if f1 <= f0 + 1:
            continue
        t = np.arange(f0, f1 + 1) / freq
        nf = len(t)
        base_center = all_centers[plan.lane_seq[0][1]]
        lat = np.full(nf, base_center)
        speed = np.full(nf, plan.speed)
        driver_left_sign = 1.0 if plan.direction == 1 else -1.0

        if plan.lc is not None:
            t_cross, lane_from, lane_to = plan.lc
            c0, c1 = all_centers[lane_from], all_centers[lane_to]
            delta = c1 - c0
            t_start = t_cross - d_lc / 2
            u = (t - t_start) / d_lc
            lat = c0 + delta * _quintic(u)
            # direction-coded precursor drift, fading out over the maneuver
            drift = params.cue_drift_m * np.sign(delta) \
                * _smoothstep((t - (t_start - lead)) / lead) * (1.0 - _quintic(u))
            lat = lat + drift
            toward_left = (np.sign(delta) * driver_left_sign) > 0
            gain = params.speed_adjust_gain * (1.0 if toward_left else -1.0)
            speed = plan.speed * (1.0 + gain * _smoothstep((t - (t_start - lead)) / lead))

        # OU lateral jitter
        theta, sigma = params.lat_jitter_theta, params.lat_jitter_sigma
        decay = np.exp(-theta * dt)
        scale = sigma * np.sqrt(1.0 - decay ** 2)
        noise = rng.standard_normal(nf)
        jitter = np.empty(nf)
        jitter[0] = sigma * noise[0]
        for k in range(1, nf):
            jitter[k] = decay * jitter[k - 1] + scale * noise[k]
        lat = lat + jitter

        s_road = plan.s0 + plan.direction * np.concatenate(
            ([0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * dt)))
        inside = (s_road >= 0.0) & (s_road <= params.road_length)
        if not inside.all():
            keep = np.flatnonzero(inside)
            if len(keep) < 2:
                continue
            sl = slice(keep[0], keep[-1] + 1)
            t, lat, s_road = t[sl], lat[sl], s_road[sl]
            nf = len(t)
        x, y = _road_to_cartesian(params, s_road, lat)
        vx = np.empty(nf)
        vy = np.empty(nf)
        vx[1:-1] = (x[2:] - x[:-2]) * freq / 2.0
        vy[1:-1] = (y[2:] - y[:-2]) * freq / 2.0
        vx[0], vx[-1] = (x[1] - x[0]) * freq, (x[-1] - x[-2]) * freq
        vy[0], vy[-1] = (y[1] - y[0]) * freq, (y[-1] - y[-2]) * freq

        # per-frame lane assignment: nearest center among this direction's lanes
        lane_ids = (mainline1 + ([_RAMP_ID] if params.with_ramp else [])) \
            if plan.direction == 1 else mainline2
        centers = np.array([all_centers[lid] for lid in lane_ids])
        lane_idx = np.argmin(np.abs(centers[None, :] - lat[:, None]), axis=1)
        frames = np.round(t * freq).astype(int)

        # ground truth: first frame whose nearest-center lane differs
        for k in range(1, nf):
            if lane_idx[k] != lane_idx[k - 1]:
                dl = centers[lane_idx[k]] - centers[lane_idx[k - 1]]
                direction = "Left" if dl * driver_left_sign > 0 else "Right"
                rows_gt.append((plan.track_id, int(frames[k]), direction))

        boundary_zone = params.lane_width / 2 - plan.width / 2
        for k in range(nf):
            lid = lane_ids[lane_idx[k]]
            lanelet = str(lid)
            # partial occupancy: near a boundary the vehicle straddles two lanes
            off = lat[k] - centers[lane_idx[k]]
            if abs(off) > boundary_zone and len(centers) > 1:
                ascending = centers[1] > centers[0]
                j = lane_idx[k] + (1 if (off > 0) == ascending else -1)
                if 0 <= j < len(centers):
                    lanelet = f"{lid};{lane_ids[j]}"
            rows_track.append((
                plan.track_id, int(frames[k]),
                x[k], y[k], vx[k], vy[k],
                lid, lanelet, plan.width, plan.length, plan.vclass,
            ))

    # --- write artifacts ---------------------------------------------------
    paths = {
        "tracks": os.path.join(out_dir, "tracks.csv"),
        "meta": os.path.join(out_dir, "recordingMeta.csv"),
        "lane_config": os.path.join(out_dir, "lane_config.json"),
        "groundtruth": os.path.join(out_dir, "groundtruth_lc.csv"),
        "params": os.path.join(out_dir, "population_params.json"),
    }
    with open(paths["tracks"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["recordingId", "trackId", "frame", "xCenter", "yCenter",
                    "xVelocity", "yVelocity", "laneId", "laneletId", "width",
                    "length", "class"])
        for (tid, frame, x, y, vx, vy, lid, lanelet, width, length, vclass) in rows_track:
            w.writerow([params.recording_id, tid, frame,
                        "%.17g" % x, "%.17g" % y, "%.17g" % vx, "%.17g" % vy,
                        lid, lanelet, "%.17g" % width, "%.17g" % length, vclass])
    with open(paths["meta"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["recordingId", "locationId", "frameRate", "driveSide"])
        w.writerow([params.recording_id, params.location_id,
                    "%.17g" % params.frequency_hz, params.drive_side])
    write_lane_config(params, paths["lane_config"])
    with open(paths["groundtruth"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trackId", "frame", "direction"])
        for tid, frame, direction in rows_gt:
            w.writerow([tid, frame, direction])
    with open(paths["params"], "w", encoding="utf-8") as fh:
        json.dump(asdict(params), fh, indent=2, sort_keys=True)
    return paths
