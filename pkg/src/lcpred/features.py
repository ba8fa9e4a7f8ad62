"""Fixed-shape sample construction: feature rows, resampling, centering,
normalization, class balancing, and the processed-dataset file format.

Every sample is a 50 x 36 matrix. Row layout: the target's (l, s, l_dot,
s_dot) followed by one four-value block per neighbor slot in the order p, f,
lp, la, lf, rp, ra, rf, each holding (dl, ds, l_dot, s_dot) of that neighbor.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySet, InsufficientClass, InvalidScene, TooShort
from .ingest import DirectionConfig
from .scene import SLOTS, SceneFrame
from .segment import Label

N_TIMESTEPS = 50
N_FEATURES = 36
DS_CLIP = 200.0  # m, longitudinal distance clipping

COLUMNS = ["l", "s", "l_dot", "s_dot"] + [
    f"{q}_{slot}" for slot in SLOTS for q in ("dl", "ds", "l_dot", "s_dot")
]

_PRECEDING = {"p", "lp", "rp"}
_FOLLOWING = {"f", "lf", "rf"}


@dataclass(frozen=True)
class MissingNeighborPolicy:
    """Fill-in values for absent neighbor slots.

    An absent neighbor is encoded as a far-away vehicle in the slot's lane
    moving exactly like the target, so relative motion carries no signal.
    """

    far_distance: float = DS_CLIP

    def to_json(self):
        return {"farDistance": self.far_distance}

    @classmethod
    def from_json(cls, obj):
        return cls(far_distance=float(obj["farDistance"]))


@dataclass
class Sample:
    matrix: np.ndarray  # (50, 36)
    label: Label
    dataset_tag: str
    provenance: tuple  # (track_id, start_frame, end_frame)

    @property
    def sample_id(self) -> str:
        tid, start, end = self.provenance
        return f"{self.dataset_tag}:{tid}:{start}:{end}"


def _slot_lane_offset(slot: str, target_l: float, dcfg: DirectionConfig) -> float:
    """Lateral offset of the slot's lane center relative to the target."""
    if slot in ("p", "f"):
        return 0.0
    centers = np.sort(np.asarray(dcfg.lane_centers, dtype=float))
    ti = int(np.argmin(np.abs(centers - target_l)))
    if slot.startswith("l"):
        if ti + 1 < len(centers):
            return float(centers[ti + 1] - centers[ti])
        return dcfg.lane_width
    if ti - 1 >= 0:
        return float(centers[ti - 1] - centers[ti])
    return -dcfg.lane_width


def build_feature_row(target, scene: SceneFrame, dcfg: DirectionConfig,
                      policy: MissingNeighborPolicy = MissingNeighborPolicy()) -> np.ndarray:
    """One 36-feature row for the target at a single frame."""
    if not scene.valid:
        raise InvalidScene(f"scene at frame {scene.frame} is invalid ({scene.invalid_reason})")
    row = np.empty(N_FEATURES)
    row[0:4] = (target.l, target.s, target.l_dot, target.s_dot)
    for k, slot in enumerate(SLOTS):
        off = 4 + 4 * k
        entry = scene.neighbors[slot]
        if entry is not None:
            st = entry[1]
            dl = st.l - target.l
            ds = float(np.clip(st.s - target.s, -DS_CLIP, DS_CLIP))
            row[off:off + 4] = (dl, ds, st.l_dot, st.s_dot)
        else:
            ds = -policy.far_distance if slot in _FOLLOWING else policy.far_distance
            dl = _slot_lane_offset(slot, target.l, dcfg)
            row[off:off + 4] = (dl, ds, target.l_dot, target.s_dot)
    return row


def resample_segment(matrix: np.ndarray, n_out: int = N_TIMESTEPS) -> np.ndarray:
    """Per-column linear interpolation onto ``n_out`` uniformly spaced rows."""
    matrix = np.asarray(matrix, dtype=float)
    n_in = matrix.shape[0]
    if n_in < 2:
        raise TooShort("need at least 2 rows to resample")
    if n_in == n_out:
        return matrix.copy()
    src = np.arange(n_in, dtype=float)
    dst = np.linspace(0.0, n_in - 1.0, n_out)
    out = np.empty((n_out, matrix.shape[1]))
    for j in range(matrix.shape[1]):
        out[:, j] = np.interp(dst, src, matrix[:, j])
    out[0] = matrix[0]
    out[-1] = matrix[-1]
    return out


def center_positions(matrix: np.ndarray) -> np.ndarray:
    """Subtract the temporal mean from the target position columns (l, s).

    Relative-distance columns are translation-invariant already and are left
    untouched. Idempotent.
    """
    out = np.array(matrix, dtype=float, copy=True)
    out[:, 0] -= out[:, 0].mean()
    out[:, 1] -= out[:, 1].mean()
    return out


@dataclass
class Normalizer:
    mean: np.ndarray  # (36,)
    std: np.ndarray   # (36,)

    @classmethod
    def fit(cls, samples) -> "Normalizer":
        if not samples:
            raise EmptySet("cannot fit a normalizer on an empty training set")
        stacked = np.concatenate([np.asarray(s.matrix, dtype=np.float64) for s in samples], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        zero = std == 0.0
        if np.any(zero):
            warnings.warn(f"{int(zero.sum())} constant feature column(s); std set to 1")
            std = np.where(zero, 1.0, std)
        return cls(mean=mean, std=std)

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return (np.asarray(matrix, dtype=np.float64) - self.mean) / self.std

    def apply_sample(self, sample: Sample) -> Sample:
        return Sample(matrix=self.apply(sample.matrix), label=sample.label,
                      dataset_tag=sample.dataset_tag, provenance=sample.provenance)

    def to_json(self):
        return {"mean": ["%.17g" % v for v in self.mean],
                "std": ["%.17g" % v for v in self.std]}

    @classmethod
    def from_json(cls, obj) -> "Normalizer":
        return cls(mean=np.array([float(v) for v in obj["mean"]]),
                   std=np.array([float(v) for v in obj["std"]]))


def balance_dataset(samples, per_class_lc: int, rng) -> list:
    """Subsample to per_class_lc LLC + per_class_lc RLC + 2*per_class_lc LK
    per population, uniformly without replacement."""
    wanted = {Label.LLC: per_class_lc, Label.RLC: per_class_lc, Label.LK: 2 * per_class_lc}
    by_tag = {}
    for s in samples:
        by_tag.setdefault(s.dataset_tag, {}).setdefault(s.label, []).append(s)
    out = []
    for tag in sorted(by_tag):
        for label in (Label.LK, Label.LLC, Label.RLC):
            pool = sorted(by_tag[tag].get(label, []), key=lambda s: s.sample_id)
            k = wanted[label]
            if len(pool) < k:
                raise InsufficientClass(tag, label.name, len(pool), k)
            idx = rng.choice(len(pool), size=k, replace=False)
            out.extend(pool[i] for i in sorted(idx))
    return out


_MIRROR_LABEL = {Label.LK: Label.LK, Label.LLC: Label.RLC, Label.RLC: Label.LLC}
_MIRROR_SLOT = {"p": "p", "f": "f", "lp": "rp", "la": "ra", "lf": "rf",
                "rp": "lp", "ra": "la", "rf": "lf"}


def mirror_sample(sample: Sample) -> Sample:
    """Lateral reflection at the sample level: used to check that mirroring
    raw states commutes with feature extraction."""
    src = np.asarray(sample.matrix)
    out = np.empty_like(src)
    out[:, 0] = -src[:, 0]
    out[:, 1] = src[:, 1]
    out[:, 2] = -src[:, 2]
    out[:, 3] = src[:, 3]
    for k, slot in enumerate(SLOTS):
        j = SLOTS.index(_MIRROR_SLOT[slot])
        out[:, 4 + 4 * k + 0] = -src[:, 4 + 4 * j + 0]
        out[:, 4 + 4 * k + 1] = src[:, 4 + 4 * j + 1]
        out[:, 4 + 4 * k + 2] = -src[:, 4 + 4 * j + 2]
        out[:, 4 + 4 * k + 3] = src[:, 4 + 4 * j + 3]
    return Sample(matrix=out, label=_MIRROR_LABEL[sample.label],
                  dataset_tag=sample.dataset_tag, provenance=sample.provenance)


MAGIC = b"LCDS"


def write_dataset(path, samples, header_extra: dict | None = None) -> None:
    """Processed-dataset container: JSON header + float32 row-major blob."""
    X = np.stack([np.asarray(s.matrix, dtype="<f4") for s in samples]) if samples \
        else np.zeros((0, N_TIMESTEPS, N_FEATURES), dtype="<f4")
    header = {
        "format": "lcpred-dataset-v1",
        "shape": list(X.shape),
        "columns": COLUMNS,
        "labelMap": {l.name: int(l) for l in Label},
        "labels": [int(s.label) for s in samples],
        "datasetTags": [s.dataset_tag for s in samples],
        "provenance": [list(s.provenance) for s in samples],
    }
    if header_extra:
        header.update(header_extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(X.tobytes())


def read_dataset(path):
    """Returns (samples, header)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        shape = tuple(header["shape"])
        X = np.frombuffer(fh.read(), dtype="<f4").reshape(shape)
    samples = [
        Sample(matrix=X[i].astype(np.float64), label=Label(header["labels"][i]),
               dataset_tag=header["datasetTags"][i],
               provenance=tuple(header["provenance"][i]))
        for i in range(shape[0])
    ]
    return samples, header
