"""Stage orchestration: raw recordings to the cross-population report.

Each stage reads its predecessor's persisted artifacts and writes its own
under the configured output directory, so any stage can be re-run in
isolation. Every artifact directory carries a stage metadata file embedding
the effective config hash and global seed.

Layout under ``out_dir``::

    raw/<tag>/         synthetic recording (tracks.csv, recordingMeta.csv, ...)
    proc/<tag>/        refpath.csv, frenet.csv, segments.csv, dataset.lcds
    models/            one checkpoint per (regime, seed)
    experiment/        evaluations.json, accuracy_matrix.csv, report.json, svg
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import time

import numpy as np
from scipy.spatial import cKDTree

from . import frenet as frenet_mod
from . import model as model_mod
from .errors import StageError
from .experiment import (AccuracyMatrix, ExperimentPlan, _sample_id_digest,
                         _confusion, _to_arrays, emit_report, make_splits)
from .features import (MissingNeighborPolicy, Normalizer, Sample,
                       balance_dataset, build_feature_row, center_positions,
                       read_dataset, resample_segment, write_dataset)
from .ingest import DriveSide, load_lane_config, load_recording, ramp_exclusion_mask
from .model import ModelConfig, TrainConfig
from .refpath import ReferencePath, build_reference_path, extract_zero_boundary
from .scene import CandidateState, assign_neighbors, double_alongside_invalid, validate_scene
from .segment import (Label, cut_lc_segment, detect_lc_instants,
                      load_segments_csv, sample_lk_segment, save_segments_csv)
from .svm import fit_rbf_svm
from .synth import PopulationParams, generate_population

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/demo",
    "populations": [],
    "svm": {"subsample": 2000, "c": 10.0, "gamma": 0.2, "tol": 1e-3,
            "max_iter": 3000000},
    "boundary": {"grid_step": 2.0, "class_distance_ratio": 1.5,
                 "max_class_distance": 8.0, "smoothing_window": 61,
                 "smoothing_passes": 3, "spacing": 1.0},
    "frenet": {"ldot_formula": "sin", "curvature_threshold": 0.001},
    "scene": {"ramp_lateral_limit": 6.0},
    "segment": {"delta_t_o": 2.0, "delta_t_p_max": 4.0, "max_draws": 10},
    "features": {"per_class_lc": 80, "far_distance": 200.0},
    "model": {"d_model": 32, "n_layers": 1, "n_heads": 4, "d_ff": 64,
              "dropout": 0.1, "pooling": "mean"},
    "train": {"lr": 1e-3, "batch_size": 64, "max_epochs": 40, "patience": 10},
    "experiment": {"split_fraction": 0.8, "seeds": [0, 1, 2, 3, 4],
                   "split_seed": 0},
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Effective config: defaults, then file, then explicit overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = _deep_merge(cfg, json.load(fh))
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    """Digest of everything that affects artifact content.

    The output directory is excluded so the same configuration written to two
    locations produces byte-identical artifacts.
    """
    hashed = {k: v for k, v in cfg.items() if k != "out_dir"}
    return hashlib.sha256(
        json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _raw_dir(cfg, tag):
    return os.path.join(cfg["out_dir"], "raw", tag)


def _proc_dir(cfg, tag):
    return os.path.join(cfg["out_dir"], "proc", tag)


def _write_meta(cfg, directory, stage, extra: dict):
    os.makedirs(directory, exist_ok=True)
    doc = {"stage": stage, "configHash": config_hash(cfg), "seed": cfg["seed"]}
    doc.update(extra)
    with open(os.path.join(directory, f"{stage}_meta.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _need(path, stage):
    if not os.path.exists(path):
        raise StageError(stage, FileNotFoundError(f"missing artifact: {path}"))
    return path


def population_tags(cfg) -> list:
    return [p["tag"] for p in cfg["populations"]]


def _population_entry(cfg, tag) -> dict:
    for p in cfg["populations"]:
        if p["tag"] == tag:
            return p
    raise StageError("config", KeyError(f"unknown population {tag!r}"))


# ---------------------------------------------------------------------------
# stage: synth

def stage_synth(cfg, tag, log=None) -> dict:
    entry = _population_entry(cfg, tag)
    params = PopulationParams(**{**entry.get("params", {}), "tag": tag,
                                 "seed": cfg["seed"] + entry.get("seed_offset", 0)})
    out = _raw_dir(cfg, tag)
    t0 = time.time()
    paths = generate_population(params, entry["n_tracks"], entry["duration_s"], out)
    _write_meta(cfg, out, "synth", {"tag": tag, "nTracks": entry["n_tracks"],
                                    "durationS": entry["duration_s"]})
    if log:
        log(f"[synth:{tag}] wrote {out} in {time.time() - t0:.1f}s")
    return paths


def _load_raw(cfg, tag, stage):
    raw = _raw_dir(cfg, tag)
    lane_config = load_lane_config(_need(os.path.join(raw, "lane_config.json"), stage))
    bundle = load_recording(_need(os.path.join(raw, "tracks.csv"), stage),
                            _need(os.path.join(raw, "recordingMeta.csv"), stage),
                            lane_config)
    return bundle, lane_config[bundle.location_id]


def stage_ingest(cfg, tag, log=None):
    bundle, lane_config = _load_raw(cfg, tag, "ingest")
    proc = _proc_dir(cfg, tag)
    _write_meta(cfg, proc, "ingest", {
        "tag": tag,
        "nTracks": len(bundle.tracks),
        "nFrames": int(sum(len(t) for t in bundle.tracks)),
        "frequencyHz": bundle.frequency_hz,
        "driveSide": bundle.drive_side.value,
        "locationId": bundle.location_id,
    })
    if log:
        log(f"[ingest:{tag}] {len(bundle.tracks)} tracks at "
            f"{bundle.frequency_hz:g} Hz, drive side {bundle.drive_side.value}")
    return bundle, lane_config


# ---------------------------------------------------------------------------
# stage: refpath

def stage_refpath(cfg, tag, log=None) -> ReferencePath:
    bundle, lane_config = _load_raw(cfg, tag, "refpath")
    dcfg1 = lane_config.direction("dir1")
    svm_cfg, b_cfg = cfg["svm"], cfg["boundary"]

    points, labels, vels = [], [], []
    for track in bundle.tracks:
        for lane_id, label in zip(dcfg1.svm_lane_ids, (-1.0, 1.0)):
            sel = track.lane_id == lane_id
            if sel.any():
                points.append(np.column_stack([track.x[sel], track.y[sel]]))
                labels.append(np.full(int(sel.sum()), label))
                if label < 0:
                    vels.append(np.column_stack([track.vx[sel], track.vy[sel]]))
    if not points:
        raise StageError("refpath", ValueError("no points on the SVM lanes"))
    X = np.vstack(points)
    y = np.concatenate(labels)
    travel = np.vstack(vels).mean(axis=0)
    travel /= np.linalg.norm(travel)

    rng = np.random.default_rng(cfg["seed"])
    n_sub = min(int(svm_cfg["subsample"]), len(X))
    idx = rng.choice(len(X), size=n_sub, replace=False)
    t0 = time.time()
    model = fit_rbf_svm(X[idx], y[idx], c=svm_cfg["c"], gamma=svm_cfg["gamma"],
                        tol=svm_cfg["tol"], max_iter=int(svm_cfg["max_iter"]),
                        seed=cfg["seed"])
    t_svm = time.time() - t0

    margin = 5.0
    bbox = ((X[:, 0].min() - margin, X[:, 1].min() - margin),
            (X[:, 0].max() + margin, X[:, 1].max() + margin))
    boundary = extract_zero_boundary(model, bbox, b_cfg["grid_step"],
                                     travel_direction=travel)
    # the far field of the decision function can produce spurious contours
    # around a single class; keep only points roughly equidistant from both
    d_neg = cKDTree(X[y < 0]).query(boundary)[0]
    d_pos = cKDTree(X[y > 0]).query(boundary)[0]
    ratio, max_d = b_cfg["class_distance_ratio"], b_cfg["max_class_distance"]
    keep = ((d_neg < ratio * d_pos) & (d_pos < ratio * d_neg)
            & (np.maximum(d_neg, d_pos) < max_d))
    boundary = boundary[keep]

    path = build_reference_path(boundary, b_cfg["smoothing_window"],
                                b_cfg["spacing"], direction_tag="dir1",
                                smoothing_passes=b_cfg["smoothing_passes"])
    proc = _proc_dir(cfg, tag)
    os.makedirs(proc, exist_ok=True)
    path.save_csv(os.path.join(proc, "refpath.csv"))
    kappa = np.abs(path.curvature)
    _write_meta(cfg, proc, "refpath", {
        "tag": tag,
        "nSupportVectors": len(model.support_points),
        "nBoundaryPoints": int(keep.sum()),
        "nBoundaryDropped": int((~keep).sum()),
        "nPathPoints": len(path),
        "kappaAbsMax": float(kappa.max()),
        "kappaAbsP95": float(np.percentile(kappa, 95)),
        "svmSeconds": round(t_svm, 2),
    })
    if log:
        log(f"[refpath:{tag}] SVM {t_svm:.1f}s, {len(model.support_points)} SVs, "
            f"{len(path)} path points, |kappa| p95 "
            f"{np.percentile(kappa, 95):.2e}")
    return path


# ---------------------------------------------------------------------------
# stage: convert

def _track_direction(track, dcfg1) -> str:
    return "dir1" if int(track.lane_id[0]) in dcfg1.lane_ids else "dir2"


def stage_convert(cfg, tag, log=None):
    bundle, lane_config = _load_raw(cfg, tag, "convert")
    proc = _proc_dir(cfg, tag)
    path1 = ReferencePath.load_csv(_need(os.path.join(proc, "refpath.csv"),
                                         "convert"), "dir1")
    path2 = path1.reversed("dir2")
    dcfg1 = lane_config.direction("dir1")
    mirrored = bundle.drive_side == DriveSide.LEFT
    f_cfg = cfg["frenet"]

    ftracks = []
    directions = {}
    t0 = time.time()
    for track in bundle.tracks:
        direction = _track_direction(track, dcfg1)
        path = path1 if direction == "dir1" else path2
        ftrack = frenet_mod.track_to_frenet(
            path, track, ldot_formula=f_cfg["ldot_formula"],
            curvature_threshold=f_cfg["curvature_threshold"])
        if mirrored:
            # normalize left-hand traffic to the right-hand convention before
            # any scene or label logic runs
            ftrack = ftrack.mirrored()
        ftracks.append(ftrack)
        directions[str(track.track_id)] = direction
    frenet_mod.save_frenet_csv(os.path.join(proc, "frenet.csv"), ftracks)
    gated = sum(int(ft.gated.sum()) for ft in ftracks)
    total = sum(len(ft) for ft in ftracks)
    meta = {
        "tag": tag,
        "trackDirections": directions,
        "mirrored": mirrored,
        "ldotFormula": f_cfg["ldot_formula"],
        "gatedFraction": gated / max(total, 1),
    }
    if f_cfg["ldot_formula"] != "sin":
        meta["ldotFormulaNote"] = ("lateral velocity uses the published cosine "
                                   "form; it does not vanish for path-parallel "
                                   "motion")
    _write_meta(cfg, proc, "convert", meta)
    if log:
        log(f"[convert:{tag}] {len(ftracks)} tracks in {time.time() - t0:.1f}s, "
            f"gated {gated / max(total, 1):.1%}, mirrored={mirrored}")
    return ftracks, directions


def _load_converted(cfg, tag, stage):
    proc = _proc_dir(cfg, tag)
    ftracks = frenet_mod.load_frenet_csv(_need(os.path.join(proc, "frenet.csv"), stage))
    with open(_need(os.path.join(proc, "convert_meta.json"), stage),
              encoding="utf-8") as fh:
        meta = json.load(fh)
    return ftracks, meta


def _direction_configs(lane_config, mirrored):
    out = {}
    for name in ("dir1", "dir2"):
        dcfg = lane_config.direction(name)
        out[name] = dcfg.mirrored() if mirrored else dcfg
    return out


def _scene_validity(tracks_by_dir, dcfgs, lane_config, ramp_limit):
    """Per-track boolean arrays: True where the vehicle's scene is valid."""
    valid = {}
    for direction, group in tracks_by_dir.items():
        for track, ftrack in group:
            valid[track.track_id] = np.ones(len(ftrack), dtype=bool)
        if not group:
            continue
        f_lo = min(int(ft.frames[0]) for _, ft in group)
        f_hi = max(int(ft.frames[-1]) for _, ft in group)
        for frame in range(f_lo, f_hi + 1):
            active = [(track, ftrack) for track, ftrack in group
                      if ftrack.frames[0] <= frame <= ftrack.frames[-1]]
            if len(active) < 3:
                continue  # a double-alongside needs at least 3 vehicles
            idx = [frame - int(ft.frames[0]) for _, ft in active]
            l = np.array([ft.l[i] for (_, ft), i in zip(active, idx)])
            s = np.array([ft.s[i] for (_, ft), i in zip(active, idx)])
            length = np.array([t.length for t, _ in active])
            is_ramp = np.array([lane_config.is_ramp(int(t.lane_id[i]))
                                for (t, _), i in zip(active, idx)])
            invalid = double_alongside_invalid(l, s, length, is_ramp,
                                               dcfgs[direction], ramp_limit)
            for (track, _), i, bad in zip(active, idx, invalid):
                if bad:
                    valid[track.track_id][i] = False
    return valid


def _group_by_direction(bundle, ftracks, directions):
    by_id = {ft.track_id: ft for ft in ftracks}
    groups = {"dir1": [], "dir2": []}
    for track in bundle.tracks:
        groups[directions[str(track.track_id)]].append((track, by_id[track.track_id]))
    return groups


def _frames_of_interest(cfg, bundle, lane_config, tracks_by_dir, dcfgs):
    """Per-track mask: not ramp-gated, not curvature-gated, scene-valid."""
    scene_ok = _scene_validity(tracks_by_dir, dcfgs, lane_config,
                               cfg["scene"]["ramp_lateral_limit"])
    foi = {}
    for group in tracks_by_dir.values():
        for track, ftrack in group:
            foi[track.track_id] = (~ramp_exclusion_mask(track, lane_config)
                                   & ~ftrack.gated
                                   & scene_ok[track.track_id])
    return foi


def stage_segment(cfg, tag, log=None) -> list:
    bundle, lane_config = _load_raw(cfg, tag, "segment")
    ftracks, meta = _load_converted(cfg, tag, "segment")
    dcfgs = _direction_configs(lane_config, meta["mirrored"])
    tracks_by_dir = _group_by_direction(bundle, ftracks, meta["trackDirections"])
    t0 = time.time()
    foi = _frames_of_interest(cfg, bundle, lane_config, tracks_by_dir, dcfgs)
    s_cfg = cfg["segment"]

    segments = []
    for direction, group in tracks_by_dir.items():
        for track, ftrack in group:
            rng = np.random.default_rng([cfg["seed"], track.track_id])
            instants = detect_lc_instants(ftrack, dcfgs[direction])
            mask = foi[track.track_id]
            for instant in instants:
                seg = cut_lc_segment(ftrack, mask, instants, instant,
                                     bundle.frequency_hz, rng,
                                     delta_t_o=s_cfg["delta_t_o"],
                                     delta_t_p_max=s_cfg["delta_t_p_max"],
                                     max_draws=s_cfg["max_draws"],
                                     dataset_tag=tag)
                if seg is not None:
                    segments.append(seg)
            seg = sample_lk_segment(ftrack, mask, instants, bundle.frequency_hz,
                                    rng, delta_t_o=s_cfg["delta_t_o"],
                                    delta_t_p_max=s_cfg["delta_t_p_max"],
                                    dataset_tag=tag)
            if seg is not None:
                segments.append(seg)

    proc = _proc_dir(cfg, tag)
    save_segments_csv(os.path.join(proc, "segments.csv"), segments)
    counts = {label.name: sum(1 for s in segments if s.label == label)
              for label in Label}
    _write_meta(cfg, proc, "segment", {"tag": tag, "counts": counts})
    if log:
        log(f"[segment:{tag}] {counts} in {time.time() - t0:.1f}s")
    return segments


# ---------------------------------------------------------------------------
# stage: features

def stage_features(cfg, tag, log=None) -> list:
    bundle, lane_config = _load_raw(cfg, tag, "features")
    ftracks, meta = _load_converted(cfg, tag, "features")
    proc = _proc_dir(cfg, tag)
    segments = load_segments_csv(_need(os.path.join(proc, "segments.csv"),
                                       "features"))
    dcfgs = _direction_configs(lane_config, meta["mirrored"])
    directions = meta["trackDirections"]
    tracks_by_dir = _group_by_direction(bundle, ftracks, directions)
    by_id = {t.track_id: (t, ft) for g in tracks_by_dir.values() for t, ft in g}
    policy = MissingNeighborPolicy(far_distance=cfg["features"]["far_distance"])
    ramp_limit = cfg["scene"]["ramp_lateral_limit"]

    t0 = time.time()
    samples = []
    for seg in segments:
        direction = directions[str(seg.track_id)]
        dcfg = dcfgs[direction]
        group = tracks_by_dir[direction]
        rows = []
        for frame in range(seg.start_frame, seg.end_frame + 1):
            candidates = []
            for track, ftrack in group:
                if not (ftrack.frames[0] <= frame <= ftrack.frames[-1]):
                    continue
                i = frame - int(ftrack.frames[0])
                candidates.append(CandidateState(
                    track_id=track.track_id, state=ftrack.state(i),
                    length=track.length, lane_id=int(track.lane_id[i])))
            scene = validate_scene(assign_neighbors(
                candidates, seg.track_id, lane_config, dcfg, frame,
                ramp_lateral_limit=ramp_limit))
            rows.append(build_feature_row(scene.target, scene, dcfg, policy))
        matrix = center_positions(resample_segment(np.asarray(rows)))
        samples.append(Sample(matrix=matrix, label=seg.label, dataset_tag=tag,
                              provenance=(seg.track_id, seg.start_frame,
                                          seg.end_frame)))

    rng = np.random.default_rng([cfg["seed"], len(tag), sum(map(ord, tag))])
    balanced = balance_dataset(samples, cfg["features"]["per_class_lc"], rng)
    out = os.path.join(proc, "dataset.lcds")
    write_dataset(out, balanced, header_extra={
        "configHash": config_hash(cfg), "seed": cfg["seed"], "tag": tag,
        "missingNeighborPolicy": policy.to_json(),
    })
    _write_meta(cfg, proc, "features", {
        "tag": tag, "nRaw": len(samples), "nBalanced": len(balanced),
        "perClassLc": cfg["features"]["per_class_lc"],
    })
    if log:
        log(f"[features:{tag}] {len(samples)} raw -> {len(balanced)} balanced "
            f"in {time.time() - t0:.1f}s")
    return balanced


# ---------------------------------------------------------------------------
# stages: train / evaluate / report

def _plan(cfg) -> ExperimentPlan:
    e = cfg["experiment"]
    return ExperimentPlan(populations=tuple(population_tags(cfg)),
                          split_fraction=e["split_fraction"],
                          seeds=tuple(e["seeds"]), split_seed=e["split_seed"])


def _load_datasets(cfg, stage) -> dict:
    out = {}
    for tag in population_tags(cfg):
        samples, _ = read_dataset(_need(
            os.path.join(_proc_dir(cfg, tag), "dataset.lcds"), stage))
        out[tag] = samples
    return out


def _model_configs(cfg, seed):
    mcfg = ModelConfig(**{**cfg["model"], "seed": seed})
    tcfg = TrainConfig(**{**cfg["train"], "seed": seed})
    return mcfg, tcfg


def stage_train(cfg, log=None) -> list:
    plan = _plan(cfg)
    datasets = _load_datasets(cfg, "train")
    splits = {tag: make_splits(datasets[tag], plan.split_fraction,
                               plan.split_seed) for tag in plan.populations}
    test_ids = {s.sample_id for tag in plan.populations for s in splits[tag][1]}
    model_dir = os.path.join(cfg["out_dir"], "models")
    os.makedirs(model_dir, exist_ok=True)

    written = []
    for regime in plan.regimes:
        train_samples = []
        for tag in plan.training_tags(regime):
            train_samples.extend(splits[tag][0])
        leaked = [s.sample_id for s in train_samples if s.sample_id in test_ids]
        assert not leaked, f"test samples leaked into training: {leaked[:3]}"
        for seed in plan.seeds:
            t0 = time.time()
            normalizer = Normalizer.fit(train_samples)
            Xtr, ytr = _to_arrays(train_samples, normalizer)
            mcfg, tcfg = _model_configs(cfg, seed)
            params = model_mod.init_model(mcfg)
            params, history = model_mod.train(params, (Xtr, ytr), (Xtr, ytr),
                                              mcfg, tcfg)
            path = os.path.join(model_dir, f"{regime}_seed{seed}.ckpt")
            model_mod.save_checkpoint(path, params, mcfg, extra={
                "regime": regime, "seed": seed,
                "configHash": config_hash(cfg),
                "normalizer": normalizer.to_json(),
                "trainDigest": _sample_id_digest(train_samples),
                "epochs": len(history),
            })
            written.append(path)
            if log:
                log(f"[train] {regime} seed={seed} epochs={len(history)} "
                    f"train_acc={history[-1]['val_accuracy']:.4f} "
                    f"({time.time() - t0:.1f}s)")
    _write_meta(cfg, model_dir, "train", {"checkpoints": sorted(
        os.path.basename(p) for p in written)})
    return written


def stage_evaluate(cfg, log=None) -> dict:
    plan = _plan(cfg)
    datasets = _load_datasets(cfg, "evaluate")
    splits = {tag: make_splits(datasets[tag], plan.split_fraction,
                               plan.split_seed) for tag in plan.populations}
    model_dir = os.path.join(cfg["out_dir"], "models")
    entries = []
    fit_digests = {}
    for regime in plan.regimes:
        for seed in plan.seeds:
            path = _need(os.path.join(model_dir, f"{regime}_seed{seed}.ckpt"),
                         "evaluate")
            params, mcfg, header = model_mod.load_checkpoint(path)
            normalizer = Normalizer.from_json(header["normalizer"])
            # every seed of a regime must have been fitted on the same samples
            assert fit_digests.setdefault(regime, header["trainDigest"]) \
                == header["trainDigest"], regime
            for tag in plan.populations:
                Xte, yte = _to_arrays(splits[tag][1], normalizer)
                acc, preds = model_mod.evaluate(params, Xte, yte, mcfg)
                entries.append({
                    "regime": regime, "seed": seed, "testPopulation": tag,
                    "accuracy": float(acc),
                    "confusion": _confusion(yte, preds).tolist(),
                })
                if log:
                    log(f"[evaluate] {regime} seed={seed} test={tag} "
                        f"acc={acc:.4f}")
    exp_dir = os.path.join(cfg["out_dir"], "experiment")
    os.makedirs(exp_dir, exist_ok=True)
    doc = {
        "configHash": config_hash(cfg), "seed": cfg["seed"],
        "plan": {"populations": list(plan.populations),
                 "regimes": list(plan.regimes), "seeds": list(plan.seeds),
                 "splitFraction": plan.split_fraction,
                 "splitSeed": plan.split_seed},
        "splitDigests": {tag: {"train": _sample_id_digest(splits[tag][0]),
                               "test": _sample_id_digest(splits[tag][1])}
                         for tag in plan.populations},
        "fitPhaseDigests": fit_digests,
        "entries": entries,
    }
    with open(os.path.join(exp_dir, "evaluations.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def stage_report(cfg, log=None) -> AccuracyMatrix:
    exp_dir = os.path.join(cfg["out_dir"], "experiment")
    with open(_need(os.path.join(exp_dir, "evaluations.json"), "report"),
              encoding="utf-8") as fh:
        doc = json.load(fh)
    plan = doc["plan"]
    matrix = AccuracyMatrix(regimes=tuple(plan["regimes"]),
                            populations=tuple(plan["populations"]),
                            seeds=tuple(plan["seeds"]))
    for regime in matrix.regimes:
        matrix.accuracies[regime] = {tag: [] for tag in matrix.populations}
        matrix.confusions[regime] = {tag: [] for tag in matrix.populations}
    for entry in doc["entries"]:
        matrix.accuracies[entry["regime"]][entry["testPopulation"]].append(
            entry["accuracy"])
        matrix.confusions[entry["regime"]][entry["testPopulation"]].append(
            entry["confusion"])
    matrix.meta["configHash"] = doc["configHash"]
    matrix.meta["splitDigests"] = doc["splitDigests"]
    matrix.meta["fitPhaseDigests"] = doc.get("fitPhaseDigests", {})
    paths = emit_report(matrix, exp_dir, extra_meta={"seed": cfg["seed"]})
    if log:
        for regime in matrix.regimes:
            cells = "  ".join(
                f"{tag}={matrix.cell(regime, tag)[0]:.4f}"
                for tag in matrix.populations)
            log(f"[report] {regime}: {cells}")
        log(f"[report] wrote {paths['accuracy_matrix']}")
    return matrix


# ---------------------------------------------------------------------------

PER_POPULATION_STAGES = ("synth", "ingest", "refpath", "convert", "segment",
                         "features")
GLOBAL_STAGES = ("train", "evaluate", "report")


def run_stage(cfg, stage, tag=None, log=None):
    """Run one named stage; per-population stages need ``tag``."""
    if stage in PER_POPULATION_STAGES:
        fn = globals()[f"stage_{stage}"]
        tags = [tag] if tag else population_tags(cfg)
        result = None
        for t in tags:
            result = fn(cfg, t, log=log)
        return result
    if stage in GLOBAL_STAGES:
        return globals()[f"stage_{stage}"](cfg, log=log)
    raise StageError(stage, ValueError("unknown stage"))


def run_all(cfg, log=None) -> AccuracyMatrix:
    for stage in PER_POPULATION_STAGES:
        for tag in population_tags(cfg):
            run_stage(cfg, stage, tag=tag, log=log)
    stage_train(cfg, log=log)
    stage_evaluate(cfg, log=log)
    return stage_report(cfg, log=log)
