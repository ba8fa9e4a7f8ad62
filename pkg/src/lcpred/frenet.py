"""Cartesian-to-Frenet conversion against a discretized reference path.

Projection is onto the nearest reference point (no continuous interpolation);
frames whose matched reference point is too curved are flagged so they can be
dropped from the frames of interest.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .ingest import Track
from .refpath import ReferencePath

CURVATURE_THRESHOLD = 0.001  # 1/m; matched reference points above this are gated
SINGULAR_EPS = 1e-6

LDOT_SIN = "sin"
LDOT_PAPER_COS = "paper_cos"


@dataclass(frozen=True)
class FrenetState:
    s: float
    l: float
    s_dot: float
    l_dot: float
    ref_index: int
    gated: bool = False


@dataclass
class FrenetTrack:
    """Per-frame Frenet states of one track, as parallel arrays."""

    track_id: int
    frames: np.ndarray
    s: np.ndarray
    l: np.ndarray
    s_dot: np.ndarray
    l_dot: np.ndarray
    ref_index: np.ndarray
    gated: np.ndarray

    def state(self, i: int) -> FrenetState:
        return FrenetState(
            s=float(self.s[i]), l=float(self.l[i]),
            s_dot=float(self.s_dot[i]), l_dot=float(self.l_dot[i]),
            ref_index=int(self.ref_index[i]), gated=bool(self.gated[i]),
        )

    def state_at_frame(self, frame: int) -> FrenetState:
        return self.state(int(frame - self.frames[0]))

    def __len__(self):
        return len(self.frames)

    def mirrored(self) -> "FrenetTrack":
        """Lateral reflection: l and l_dot negated, everything else kept."""
        return FrenetTrack(
            track_id=self.track_id,
            frames=self.frames,
            s=self.s,
            l=-self.l,
            s_dot=self.s_dot,
            l_dot=-self.l_dot,
            ref_index=self.ref_index,
            gated=self.gated,
        )


def nearest_reference_index(path: ReferencePath, point) -> int:
    """Index of the closest path point; ties resolve to the smaller index."""
    p = np.asarray(point, dtype=float)
    d2 = ((path.points - p) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def nearest_reference_indices(path: ReferencePath, points: np.ndarray,
                              chunk: int = 2048) -> np.ndarray:
    """Vectorized nearest-point query with the same tie rule as the scalar form."""
    points = np.asarray(points, dtype=float)
    out = np.empty(len(points), dtype=int)
    for lo in range(0, len(points), chunk):
        q = points[lo:lo + chunk]
        d2 = ((q[:, None, :] - path.points[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + chunk] = np.argmin(d2, axis=1)
    return out


class GridIndex:
    """Uniform-grid bucket index over the path points for nearest queries.

    Buckets of side ``cell`` are searched in growing rings until the best
    candidate provably beats any unvisited ring; results match the linear
    scan exactly, including the smaller-index tie rule.
    """

    def __init__(self, path: ReferencePath, cell: float = 8.0):
        self.path = path
        self.cell = cell
        self.origin = path.points.min(axis=0)
        keys = np.floor((path.points - self.origin) / cell).astype(int)
        self.buckets = {}
        for idx, (i, j) in enumerate(map(tuple, keys)):
            self.buckets.setdefault((i, j), []).append(idx)

    def query(self, point) -> int:
        p = np.asarray(point, dtype=float)
        ci, cj = np.floor((p - self.origin) / self.cell).astype(int)
        best_idx, best_d2 = -1, np.inf
        ring = 0
        while True:
            for i in range(ci - ring, ci + ring + 1):
                for j in range(cj - ring, cj + ring + 1):
                    if max(abs(i - ci), abs(j - cj)) != ring:
                        continue
                    for idx in self.buckets.get((i, j), ()):
                        d2 = float(((self.path.points[idx] - p) ** 2).sum())
                        if d2 < best_d2 or (d2 == best_d2 and idx < best_idx):
                            best_idx, best_d2 = idx, d2
            # any point in an unvisited ring is at least (ring * cell) away
            if best_idx >= 0 and best_d2 <= (ring * self.cell) ** 2:
                return best_idx
            ring += 1


def to_frenet(path: ReferencePath, x: float, y: float, vx: float, vy: float,
              theta_traj: float, ldot_formula: str = LDOT_SIN,
              curvature_threshold: float = CURVATURE_THRESHOLD) -> FrenetState:
    """Convert one Cartesian state to Frenet coordinates.

    ``theta_traj`` is the trajectory tangent at this sample. ``ldot_formula``
    selects between the kinematically consistent lateral velocity (sine of
    the heading difference, default) and the published cosine variant, which
    is retained behind this switch for comparability.
    """
    r = nearest_reference_index(path, (x, y))
    x_r, y_r = path.points[r]
    theta_r = path.tangent[r]
    k_r = path.curvature[r]
    s = float(path.cum_arclen[r])
    l_abs = float(np.hypot(y - y_r, x - x_r))
    sgn = np.sign((y - y_r) * np.cos(theta_r) - (x - x_r) * np.sin(theta_r))
    l = float(sgn * l_abs) if sgn != 0 else 0.0
    v = float(np.hypot(vx, vy))
    denom = 1.0 - k_r * l
    # endpoint matches mean the query lies beyond the path's coverage, where
    # the projection (and hence s, l) is extrapolated and unreliable
    gated = bool(abs(k_r) > curvature_threshold) or r == 0 or r == len(path) - 1
    if abs(denom) < SINGULAR_EPS:
        # singular projection: flag instead of failing the whole track
        return FrenetState(s=s, l=l, s_dot=0.0, l_dot=0.0, ref_index=r, gated=True)
    dtheta = theta_traj - theta_r
    s_dot = v / denom * np.cos(dtheta)
    if ldot_formula == LDOT_SIN:
        l_dot = v * np.sin(dtheta)
    elif ldot_formula == LDOT_PAPER_COS:
        l_dot = v * np.cos(dtheta)
    else:
        raise ValueError(f"unknown ldot_formula {ldot_formula!r}")
    return FrenetState(s=s, l=l, s_dot=float(s_dot), l_dot=float(l_dot),
                       ref_index=r, gated=gated)


def trajectory_tangent(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Heading from central position differences, one-sided at the ends."""
    n = len(x)
    dx = np.empty(n)
    dy = np.empty(n)
    if n == 1:
        return np.zeros(1)
    dx[1:-1] = x[2:] - x[:-2]
    dy[1:-1] = y[2:] - y[:-2]
    dx[0], dx[-1] = x[1] - x[0], x[-1] - x[-2]
    dy[0], dy[-1] = y[1] - y[0], y[-1] - y[-2]
    return np.arctan2(dy, dx)


def track_to_frenet(path: ReferencePath, track: Track,
                    ldot_formula: str = LDOT_SIN,
                    curvature_threshold: float = CURVATURE_THRESHOLD) -> FrenetTrack:
    """Convert a whole track; singular or over-curved frames are gated."""
    theta = trajectory_tangent(track.x, track.y)
    r = nearest_reference_indices(path, np.column_stack([track.x, track.y]))
    x_r = path.points[r, 0]
    y_r = path.points[r, 1]
    theta_r = path.tangent[r]
    k_r = path.curvature[r]
    s = path.cum_arclen[r]
    l_abs = np.hypot(track.y - y_r, track.x - x_r)
    sgn = np.sign((track.y - y_r) * np.cos(theta_r) - (track.x - x_r) * np.sin(theta_r))
    l = sgn * l_abs
    v = np.hypot(track.vx, track.vy)
    denom = 1.0 - k_r * l
    singular = np.abs(denom) < SINGULAR_EPS
    beyond = (r == 0) | (r == len(path) - 1)
    gated = (np.abs(k_r) > curvature_threshold) | singular | beyond
    dtheta = theta - theta_r
    safe = np.where(singular, 1.0, denom)
    s_dot = np.where(singular, 0.0, v / safe * np.cos(dtheta))
    if ldot_formula == LDOT_SIN:
        l_dot = np.where(singular, 0.0, v * np.sin(dtheta))
    elif ldot_formula == LDOT_PAPER_COS:
        l_dot = np.where(singular, 0.0, v * np.cos(dtheta))
    else:
        raise ValueError(f"unknown ldot_formula {ldot_formula!r}")
    return FrenetTrack(
        track_id=track.track_id,
        frames=track.frames.copy(),
        s=s.astype(float),
        l=l.astype(float),
        s_dot=s_dot.astype(float),
        l_dot=l_dot.astype(float),
        ref_index=r,
        gated=gated,
    )


def save_frenet_csv(path_out, ftracks) -> None:
    with open(path_out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trackId", "frame", "s", "l", "sdot", "ldot", "refIdx", "gated"])
        for ft in ftracks:
            for i in range(len(ft)):
                w.writerow([
                    ft.track_id, int(ft.frames[i]),
                    "%.17g" % ft.s[i], "%.17g" % ft.l[i],
                    "%.17g" % ft.s_dot[i], "%.17g" % ft.l_dot[i],
                    int(ft.ref_index[i]), int(ft.gated[i]),
                ])


def load_frenet_csv(path_in) -> list:
    import pandas as pd

    df = pd.read_csv(path_in, float_precision="round_trip")
    out = []
    for tid, g in df.groupby("trackId", sort=True):
        g = g.sort_values("frame")
        out.append(FrenetTrack(
            track_id=int(tid),
            frames=g["frame"].to_numpy(dtype=int),
            s=g["s"].to_numpy(dtype=float),
            l=g["l"].to_numpy(dtype=float),
            s_dot=g["sdot"].to_numpy(dtype=float),
            l_dot=g["ldot"].to_numpy(dtype=float),
            ref_index=g["refIdx"].to_numpy(dtype=int),
            gated=g["gated"].to_numpy(dtype=bool),
        ))
    return out
