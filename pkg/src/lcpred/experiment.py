"""Cross-population training protocol and reporting.

Builds stratified train/test splits per population, trains one model per
(regime, seed) where a regime is a choice of training populations, evaluates
every model on every population's held-out test set, and writes the accuracy
matrix with per-cell confusion counts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .errors import EmptySet, InsufficientClass, InvalidConfig
from .features import Normalizer, Sample
from .model import ModelConfig, TrainConfig
from .segment import Label


@dataclass(frozen=True)
class ExperimentPlan:
    populations: tuple            # dataset tags, order fixes matrix columns
    split_fraction: float = 0.8
    seeds: tuple = (0, 1, 2, 3, 4)
    split_seed: int = 0

    def __post_init__(self):
        if not self.populations:
            raise InvalidConfig("plan needs at least one population")
        if not (0.0 < self.split_fraction < 1.0):
            raise InvalidConfig("split_fraction must be in (0, 1); a held-out "
                                "test set is required")
        if not self.seeds:
            raise InvalidConfig("plan needs at least one seed")

    @property
    def regimes(self) -> tuple:
        """One single-population regime per population, plus joint training."""
        single = tuple(f"train-{tag}" for tag in self.populations)
        if len(self.populations) > 1:
            return single + ("train-joint",)
        return single

    def training_tags(self, regime: str) -> tuple:
        if regime == "train-joint":
            return tuple(self.populations)
        tag = regime[len("train-"):]
        if tag not in self.populations:
            raise InvalidConfig(f"unknown regime {regime!r}")
        return (tag,)


def make_splits(samples, split_fraction: float, seed: int):
    """Stratified, seeded, disjoint (train, test) partition of one population.

    Per class, floor(n * split_fraction) samples go to training; pools are
    ordered by sample id before shuffling so the split depends only on the
    sample identities, not their input order.
    """
    if not (0.0 < split_fraction < 1.0):
        raise InvalidConfig("split_fraction must be in (0, 1)")
    by_label = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted(by_label, key=int):
        pool = sorted(by_label[label], key=lambda s: s.sample_id)
        n_train = int(np.floor(len(pool) * split_fraction))
        if n_train == 0 or n_train == len(pool):
            raise InsufficientClass("", Label(label).name, len(pool), n_train or 1)
        order = rng.permutation(len(pool))
        train.extend(pool[i] for i in order[:n_train])
        test.extend(pool[i] for i in order[n_train:])
    return train, test


def _sample_id_digest(samples) -> str:
    h = hashlib.sha256()
    for sid in sorted(s.sample_id for s in samples):
        h.update(sid.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def _to_arrays(samples, normalizer: Normalizer):
    X = np.stack([normalizer.apply(s.matrix) for s in samples]).astype(np.float32)
    y = np.array([int(s.label) for s in samples], dtype=int)
    return X, y


def _confusion(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int = 3) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(y_true, y_pred):
        out[t, p] += 1
    return out


@dataclass
class AccuracyMatrix:
    """Rows = training regime, columns = test population.

    ``accuracies[regime][pop]`` is the per-seed accuracy list and
    ``confusions[regime][pop]`` the per-seed 3x3 confusion counts
    (true x predicted, class order LK, LLC, RLC).
    """

    regimes: tuple
    populations: tuple
    seeds: tuple
    accuracies: dict = field(default_factory=dict)
    confusions: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def cell(self, regime: str, pop: str):
        accs = np.asarray(self.accuracies[regime][pop], dtype=float)
        return float(accs.mean()), float(accs.std())

    def summed_confusion(self, regime: str, pop: str) -> np.ndarray:
        return np.sum(self.confusions[regime][pop], axis=0)


def run_protocol(plan: ExperimentPlan, datasets: dict,
                 model_config: ModelConfig, train_config: TrainConfig,
                 checkpoint_dir=None, log=None) -> AccuracyMatrix:
    """Train and evaluate every (regime, seed) pair.

    ``datasets`` maps population tag to its balanced, centered, unnormalized
    sample list. Per regime and seed a Normalizer is fitted on that regime's
    training samples only; the validation set used for early stopping is the
    training set itself, so test data never influences training.
    """
    for tag in plan.populations:
        if tag not in datasets or not datasets[tag]:
            raise EmptySet(f"no processed dataset for population {tag!r}")

    splits = {tag: make_splits(datasets[tag], plan.split_fraction, plan.split_seed)
              for tag in plan.populations}
    test_ids = {s.sample_id for tag in plan.populations for s in splits[tag][1]}

    matrix = AccuracyMatrix(regimes=plan.regimes, populations=plan.populations,
                            seeds=plan.seeds)
    matrix.meta["splitDigests"] = {
        tag: {"train": _sample_id_digest(splits[tag][0]),
              "test": _sample_id_digest(splits[tag][1]),
              "nTrain": len(splits[tag][0]), "nTest": len(splits[tag][1])}
        for tag in plan.populations
    }
    matrix.meta["fitPhaseDigests"] = {}

    for regime in plan.regimes:
        train_samples = []
        for tag in plan.training_tags(regime):
            train_samples.extend(splits[tag][0])
        # hygiene: nothing used for fitting may come from any test split
        leaked = [s.sample_id for s in train_samples if s.sample_id in test_ids]
        assert not leaked, f"test samples leaked into training: {leaked[:3]}"
        matrix.meta["fitPhaseDigests"][regime] = _sample_id_digest(train_samples)

        matrix.accuracies[regime] = {tag: [] for tag in plan.populations}
        matrix.confusions[regime] = {tag: [] for tag in plan.populations}
        for seed in plan.seeds:
            normalizer = Normalizer.fit(train_samples)
            Xtr, ytr = _to_arrays(train_samples, normalizer)
            mcfg = ModelConfig(**{**_asdict(model_config), "seed": seed})
            tcfg = TrainConfig(**{**_asdict(train_config), "seed": seed})
            params = model_mod.init_model(mcfg)
            params, history = model_mod.train(params, (Xtr, ytr), (Xtr, ytr),
                                              mcfg, tcfg)
            if checkpoint_dir is not None:
                os.makedirs(checkpoint_dir, exist_ok=True)
                model_mod.save_checkpoint(
                    os.path.join(checkpoint_dir, f"{regime}_seed{seed}.ckpt"),
                    params, mcfg,
                    extra={"regime": regime, "seed": seed,
                           "normalizer": normalizer.to_json(),
                           "trainDigest": matrix.meta["fitPhaseDigests"][regime]})
            for tag in plan.populations:
                Xte, yte = _to_arrays(splits[tag][1], normalizer)
                acc, preds = model_mod.evaluate(params, Xte, yte, mcfg)
                matrix.accuracies[regime][tag].append(float(acc))
                matrix.confusions[regime][tag].append(
                    _confusion(yte, preds).tolist())
                if log:
                    log(f"{regime} seed={seed} test={tag} acc={acc:.4f} "
                        f"epochs={len(history)}")
    return matrix


def _asdict(cfg) -> dict:
    from dataclasses import asdict
    return asdict(cfg)


# ---------------------------------------------------------------------------
# reporting

def emit_report(matrix: AccuracyMatrix, out_dir, extra_meta: dict | None = None) -> dict:
    """Write accuracy_matrix.csv, per-cell confusion CSVs, report.json, and an
    SVG bar chart; returns the mapping of artifact names to paths."""
    if not matrix.accuracies:
        raise EmptySet("cannot report an empty accuracy matrix")
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    paths["accuracy_matrix"] = os.path.join(out_dir, "accuracy_matrix.csv")
    with open(paths["accuracy_matrix"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["regime"] + [f"test-{tag}" for tag in matrix.populations]
                   + [f"std-{tag}" for tag in matrix.populations])
        for regime in matrix.regimes:
            cells, stds = [], []
            for tag in matrix.populations:
                mean, std = matrix.cell(regime, tag)
                cells.append("%.4f" % mean)
                stds.append("%.4f" % std)
            w.writerow([regime] + cells + stds)

    for regime in matrix.regimes:
        for tag in matrix.populations:
            name = f"confusion_{regime}_{tag}.csv"
            paths[name] = os.path.join(out_dir, name)
            conf = matrix.summed_confusion(regime, tag)
            with open(paths[name], "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["true\\pred"] + [l.name for l in Label])
                for l in Label:
                    w.writerow([l.name] + [int(c) for c in conf[int(l)]])

    paths["report"] = os.path.join(out_dir, "report.json")
    doc = {
        "regimes": list(matrix.regimes),
        "populations": list(matrix.populations),
        "seeds": list(matrix.seeds),
        "accuracies": matrix.accuracies,
        "confusions": matrix.confusions,
        "meta": matrix.meta,
    }
    if extra_meta:
        doc["meta"] = {**doc["meta"], **extra_meta}
    with open(paths["report"], "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)

    paths["chart"] = os.path.join(out_dir, "accuracy_matrix.svg")
    with open(paths["chart"], "w", encoding="utf-8") as fh:
        fh.write(_bar_chart_svg(matrix))
    return paths


def load_report(path) -> AccuracyMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return AccuracyMatrix(
        regimes=tuple(doc["regimes"]),
        populations=tuple(doc["populations"]),
        seeds=tuple(doc["seeds"]),
        accuracies=doc["accuracies"],
        confusions=doc["confusions"],
        meta=doc.get("meta", {}),
    )


_BAR_COLORS = ("#4878a8", "#e1812c", "#3a923a", "#c03d3e")


def _bar_chart_svg(matrix: AccuracyMatrix) -> str:
    """Deterministic grouped bar chart of mean test accuracy per regime."""
    regimes = matrix.regimes
    pops = matrix.populations
    bar_w, gap, group_gap = 40, 8, 36
    group_w = len(pops) * (bar_w + gap) - gap
    left, top, plot_h = 60, 30, 260
    width = left + len(regimes) * (group_w + group_gap) + 40
    height = top + plot_h + 70
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = top + plot_h * (1.0 - frac)
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{width - 20}" y2="{y:.1f}" '
                   'stroke="#dddddd" stroke-width="1"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.1f}" font-size="12" '
                   f'text-anchor="end" font-family="sans-serif">{frac:.2f}</text>')
    for gi, regime in enumerate(regimes):
        gx = left + gi * (group_w + group_gap)
        for pi, tag in enumerate(pops):
            mean, std = matrix.cell(regime, tag)
            x = gx + pi * (bar_w + gap)
            h = plot_h * mean
            y = top + plot_h - h
            color = _BAR_COLORS[pi % len(_BAR_COLORS)]
            out.append(f'<rect x="{x}" y="{y:.1f}" width="{bar_w}" height="{h:.1f}" '
                       f'fill="{color}"/>')
            out.append(f'<text x="{x + bar_w / 2:.1f}" y="{y - 4:.1f}" font-size="10" '
                       f'text-anchor="middle" font-family="sans-serif">{mean:.2f}</text>')
        out.append(f'<text x="{gx + group_w / 2:.1f}" y="{top + plot_h + 18}" '
                   'font-size="12" text-anchor="middle" '
                   f'font-family="sans-serif">{regime}</text>')
    for pi, tag in enumerate(pops):
        x = left + pi * 130
        color = _BAR_COLORS[pi % len(_BAR_COLORS)]
        y = top + plot_h + 40
        out.append(f'<rect x="{x}" y="{y}" width="12" height="12" fill="{color}"/>')
        out.append(f'<text x="{x + 18}" y="{y + 11}" font-size="12" '
                   f'font-family="sans-serif">test on {tag}</text>')
    out.append('</svg>')
    return "\n".join(out) + "\n"
