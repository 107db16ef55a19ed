"""Multi-round self-training driver and the per-stage operations behind the CLI.

Round artifacts live under <data_root>/rounds/round_<j>. Round 0 holds the
seed labels and their augmentation database; every later round holds the raw
detections, the filtered pseudo-labels, the augmentation database, and a
manifest. Detectors are trained from scratch each round: the round-j detector
sees only round j-1 labels and database, never prior model state.

Randomness is derived from (master_seed, stream, round, sample), so worker
count and round replays never change results.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import kitti_io
from .config import SelfTrainConfig, write_resolved_config
from .ephemerality import compute_pp_scores
from .errors import ConfigError, DataError, DetectorError
from .evaluation import evaluate, precision_recall
from .filtering import LabelSet, round_step
from .geometry import LabeledBox, PointCloud, Pose, rot_z
from .gt_database import (
    GtDatabase,
    build_database,
    global_augment,
    load_database,
    sample_insert,
    save_database,
)
from .kitti_io import DataRoot, RoundManifest, round_layout
from .seed_labels import generate_seed_labels
from .sim import (
    SimDetectorModel,
    SimWorld,
    gt_label_set,
    sim_infer,
    sim_train,
)

_STREAM_POSES = 0
_STREAM_AUGMENT = 1
_STREAM_INFER = 2

AUDIT_IOU = 0.25


def sample_rng(master_seed: int, stream: int, round_index: int,
               sample_id: str) -> np.random.Generator:
    return np.random.default_rng([master_seed, stream, round_index, int(sample_id)])


class LazyClouds(Mapping):
    """Mapping sample_id -> world-frame reference cloud, loaded on demand."""

    def __init__(self, root: DataRoot):
        self._root = root
        self._ids = root.sample_ids()
        self._cache: dict[str, PointCloud] = {}

    def __getitem__(self, sid: str) -> PointCloud:
        if sid not in self._cache:
            if sid not in self._ids:
                raise KeyError(sid)
            self._cache[sid] = self._root.load_reference(sid)
        return self._cache[sid]

    def __iter__(self):
        return iter(self._ids)

    def __len__(self):
        return len(self._ids)


# ---------------------------------------------------------------------------
# world generation


def write_world(world: SimWorld, root_path: Path, force: bool = False) -> None:
    """Persist a synthetic world in the sample layout the pipeline reads.

    Every scan is stored in its own sensor frame together with the pose that
    maps it back to the world frame, so loading exercises the full alignment
    path. Ground truth goes to gt/ (all objects) and gt_mobile/ (mobile
    only); per-point categories go to categories/<id>.bin as uint8.
    """
    root_path = Path(root_path)
    points_dir = root_path / "points"
    if points_dir.exists() and any(points_dir.iterdir()) and not force:
        raise DataError(f"data root already populated (use --force): {root_path}")
    for sample in world.samples:
        ts = sample.traversal_set
        sid = ts.sample_id
        rng = np.random.default_rng([world.config.rng_seed, _STREAM_POSES, int(sid)])
        scans = [ts.reference] + list(ts.traversals)
        poses = []
        for scan in scans:
            yaw = rng.uniform(-0.3, 0.3)
            txy = rng.uniform(-2.0, 2.0, 2)
            poses.append(Pose(rot_z(yaw), np.array([txy[0], txy[1], 0.0])))
        kitti_io.write_pose_file(root_path / "poses" / f"{sid}.txt", poses)
        for k, (scan, pose) in enumerate(zip(scans, poses)):
            sensor = PointCloud(pose.inverse().apply(scan.xyz), scan.intensity)
            if k == 0:
                kitti_io.write_point_bin(points_dir / f"{sid}.bin", sensor)
            else:
                kitti_io.write_point_bin(
                    root_path / "traversals" / sid / f"{k - 1}.bin", sensor
                )
        kitti_io.write_label_file(
            root_path / "gt" / f"{sid}.txt",
            [LabeledBox(o.box) for o in sample.objects],
        )
        kitti_io.write_label_file(
            root_path / "gt_mobile" / f"{sid}.txt",
            [LabeledBox(o.box) for o in sample.objects if o.is_mobile],
        )
        cat_path = root_path / "categories" / f"{sid}.bin"
        cat_path.parent.mkdir(parents=True, exist_ok=True)
        sample.categories.astype(np.uint8).tofile(cat_path)


# ---------------------------------------------------------------------------
# seed generation


def _seed_sample_worker(args) -> tuple[str, list[LabeledBox]]:
    root_path, sid, cfg = args
    root = DataRoot(Path(root_path))
    ts = root.load_traversal_set(sid)
    pp = compute_pp_scores(ts, cfg.pp_radius)
    kitti_io.write_pp_bin(root.pp_path(sid), pp)
    return sid, generate_seed_labels(ts, pp, cfg.cluster, cfg.seeds)


def _map_samples(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def seed_generate(cfg: SelfTrainConfig, force: bool = False) -> RoundManifest:
    """Compute persistence sidecars, seed labels, and the round-0 database.

    Seed labels all carry confidence 1.0, and the round-0 database is built
    from them unfiltered, so round 0 needs no score threshold.
    """
    root = DataRoot(Path(cfg.data_root))
    ids = root.sample_ids()
    if root.pp_dir.exists() and any(root.pp_dir.iterdir()) and not force:
        raise DataError(
            f"persistence sidecars already exist (use --force): {root.pp_dir}"
        )
    dirs = round_layout(root.rounds_dir, 0, force=force)
    write_resolved_config(cfg, root.rounds_dir / "resolved_config.json")

    results = _map_samples(
        _seed_sample_worker,
        [(str(root.root), sid, cfg) for sid in ids],
        cfg.workers,
    )
    seed_labels = {sid: labels for sid, labels in results}
    label_set = LabelSet(seed_labels, round_index=0)
    kitti_io.write_label_dir(dirs.pseudo_labels, seed_labels)

    clouds = LazyClouds(root)
    db = build_database(
        clouds, label_set, min_points=cfg.augment.min_db_points, round_index=0,
        manifest_ref=str(dirs.manifest_path),
    )
    save_database(db, dirs.db)

    manifest = RoundManifest(
        round_index=0,
        algorithm="seed_labels",
        rho=0.0,
        alpha=cfg.filter.alpha,
        gamma=cfg.filter.gamma,
        threshold=None,
        seed=cfg.master_seed,
        counts={
            "n_detections": label_set.n_boxes(),
            "n_pp_kept": label_set.n_boxes(),
            "n_pseudo_labels": label_set.n_boxes(),
            "n_db_source": label_set.n_boxes(),
            "n_db_entries": len(db),
            "n_db_skipped": db.skipped_sparse,
        },
        complete=True,
    )
    kitti_io.write_manifest(dirs.manifest_path, manifest)
    return manifest


# ---------------------------------------------------------------------------
# detector invocation


def build_training_set(
    clouds: Mapping,
    prev_labels: LabelSet,
    prev_db: GtDatabase,
    cfg: SelfTrainConfig,
    round_index: int,
) -> LabelSet:
    """Per-sample ground-truth sampling plus global augmentation.

    The returned set holds the boxes a from-scratch detector of this round
    would be trained on: previous pseudo-labels plus inserted database
    objects, all under the sample's global augmentation.
    """
    training: dict[str, list[LabeledBox]] = {}
    for sid in sorted(clouds):
        rng = sample_rng(cfg.master_seed, _STREAM_AUGMENT, round_index, sid)
        cloud = clouds[sid]
        labels = prev_labels.boxes.get(sid, [])
        aug_cloud, aug_labels, _ = sample_insert(cloud, labels, prev_db, cfg.augment, rng)
        _, aug_labels = global_augment(aug_cloud, aug_labels, cfg.augment, rng)
        training[sid] = aug_labels
    return LabelSet(training, round_index)


def _train_sim_model(root: DataRoot, cfg: SelfTrainConfig, j: int,
                     prev_labels_dir: Path, prev_db_dir: Path) -> SimDetectorModel:
    prev_labels = LabelSet(kitti_io.read_label_dir(prev_labels_dir), j - 1)
    prev_db = load_database(prev_db_dir)
    clouds = LazyClouds(root)
    training = build_training_set(clouds, prev_labels, prev_db, cfg, j)
    return sim_train(training, cfg.detector)


def _sim_detect(root: DataRoot, cfg: SelfTrainConfig, j: int,
                model: SimDetectorModel) -> dict[str, list[LabeledBox]]:
    if not root.gt_dir.is_dir():
        raise DataError(
            "simulate mode needs ground-truth labels under gt/ "
            "(the simulated detector derives detections from them)"
        )
    gt = kitti_io.read_label_dir(root.gt_dir)
    dets = {}
    for sid in root.sample_ids():
        rng = sample_rng(cfg.master_seed, _STREAM_INFER, j, sid)
        dets[sid] = sim_infer(model, gt.get(sid, []), cfg.detector, rng)
    return dets


def _format_cmd(template: str, **values) -> list[str]:
    try:
        rendered = template.format(**values)
    except (KeyError, IndexError) as e:
        raise ConfigError(f"bad placeholder in command template {template!r}: {e}") from e
    return shlex.split(rendered)


def _run_detector_cmd(template: str, what: str, **values) -> None:
    argv = _format_cmd(template, **values)
    if not argv:
        raise ConfigError(f"{what} command template is empty")
    result = subprocess.run(argv)
    if result.returncode != 0:
        raise DetectorError(
            f"{what} command exited with status {result.returncode}: {' '.join(argv)}"
        )


def _external_detect(root: DataRoot, cfg: SelfTrainConfig, j: int,
                     prev_labels_dir: Path, prev_db_dir: Path,
                     out_dir: Path) -> dict[str, list[LabeledBox]]:
    if not cfg.train_cmd or not cfg.infer_cmd:
        raise ConfigError("external detector mode requires train_cmd and infer_cmd")
    values = dict(
        round=j,
        points_dir=str(root.points_dir),
        labels_dir=str(prev_labels_dir),
        db_dir=str(prev_db_dir),
        out_dir=str(out_dir),
    )
    _run_detector_cmd(cfg.train_cmd, "detector train", **values)
    _run_detector_cmd(cfg.infer_cmd, "detector infer", **values)
    dets = kitti_io.read_label_dir(out_dir)
    for sid in root.sample_ids():
        dets.setdefault(sid, [])
    return dets


# ---------------------------------------------------------------------------
# self-training rounds


def _load_pp_map(root: DataRoot) -> dict:
    return {sid: root.load_pp(sid) for sid in root.sample_ids()}


def _audit_round(root: DataRoot, cfg: SelfTrainConfig, dirs,
                 pseudo: LabelSet, db_source: LabelSet) -> None:
    """Evaluate this round's label sets against ground truth, when available."""
    if not root.gt_dir.is_dir():
        return
    gt = LabelSet(kitti_io.read_label_dir(root.gt_dir))
    for name, labels in (("pseudo_labels", pseudo), ("db_labels", db_source)):
        filled = LabelSet(
            {sid: labels.boxes.get(sid, []) for sid in gt.boxes}, labels.round_index
        )
        report = evaluate(filled, gt, cfg.eval)
        (dirs.round_dir / f"audit_{name}.csv").write_text(report.to_csv())
    summary = {}
    for name, labels in (("pseudo_labels", pseudo), ("db_labels", db_source)):
        pr = precision_recall(labels, gt, iou_thr=AUDIT_IOU, metric="bev")
        summary[name] = {
            "iou": AUDIT_IOU,
            "tp": pr.tp,
            "fp": pr.fp,
            "num_gt": pr.num_gt,
            "precision": pr.precision,
            "recall": pr.recall,
            "f1": pr.f1,
        }
    with open(dirs.round_dir / "audit.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def run_round(root: DataRoot, cfg: SelfTrainConfig, j: int,
              force: bool = False) -> RoundManifest:
    """Execute round j: detect, filter, build the augmentation database."""
    rounds_root = root.rounds_dir
    prev = rounds_root / f"round_{j - 1}"
    prev_manifest = kitti_io.read_manifest(prev / "manifest.json")
    if not prev_manifest.complete:
        raise DataError(f"round {j - 1} is incomplete; rerun it first")
    prev_labels_dir = prev / "pseudo_labels"
    prev_db_dir = prev / "db"

    dirs = round_layout(rounds_root, j, force=force)
    manifest = RoundManifest(
        round_index=j,
        algorithm=cfg.filter.algorithm.value,
        rho=cfg.filter.rho,
        alpha=cfg.filter.alpha,
        gamma=cfg.filter.gamma,
        threshold=None,
        seed=cfg.master_seed,
        complete=False,
    )
    kitti_io.write_manifest(dirs.manifest_path, manifest)

    if cfg.detector_mode == "simulate":
        model = _train_sim_model(root, cfg, j, prev_labels_dir, prev_db_dir)
        dets = _sim_detect(root, cfg, j, model)
        kitti_io.write_label_dir(dirs.detections, dets)
    else:
        dets = _external_detect(
            root, cfg, j, prev_labels_dir, prev_db_dir, dirs.detections
        )

    det_set = LabelSet(dets, round_index=j)
    if det_set.n_boxes() == 0:
        raise DataError(f"round {j} produced no detections; nothing to filter")
    clouds = LazyClouds(root)
    pp = _load_pp_map(root)
    arts = round_step(det_set, clouds, pp, cfg.filter)

    kitti_io.write_label_dir(dirs.pseudo_labels, arts.pseudo_labels.boxes)
    db = build_database(
        clouds, arts.augmentation_labels,
        min_points=cfg.augment.min_db_points, round_index=j,
        manifest_ref=str(dirs.manifest_path),
    )
    save_database(db, dirs.db)
    _audit_round(root, cfg, dirs, arts.pseudo_labels, arts.augmentation_labels)

    manifest.threshold = (
        None if arts.threshold_used == float("-inf") else arts.threshold_used
    )
    manifest.counts = {
        "n_detections": arts.n_detections,
        "n_pp_kept": arts.n_pp_kept,
        "n_pseudo_labels": arts.pseudo_labels.n_boxes(),
        "n_db_source": arts.augmentation_labels.n_boxes(),
        "n_db_entries": len(db),
        "n_db_skipped": db.skipped_sparse,
    }
    manifest.complete = True
    kitti_io.write_manifest(dirs.manifest_path, manifest)
    return manifest


def self_train(cfg: SelfTrainConfig, resume: bool = False,
               force: bool = False) -> list[RoundManifest]:
    """Run rounds 1..max_rounds (round 0 must exist from seed generation)."""
    root = DataRoot(Path(cfg.data_root))
    round0 = root.rounds_dir / "round_0" / "manifest.json"
    if not round0.exists():
        raise DataError("round 0 not found; run seed-generate first")
    config_echo = root.rounds_dir / "resolved_config.json"
    if not (resume and config_echo.exists()):
        write_resolved_config(cfg, config_echo)

    manifests = []
    for j in range(1, cfg.max_rounds + 1):
        manifest_path = root.rounds_dir / f"round_{j}" / "manifest.json"
        if resume and manifest_path.exists():
            existing = kitti_io.read_manifest(manifest_path)
            if existing.complete:
                manifests.append(existing)
                continue
        redo = force or (resume and manifest_path.exists())
        manifests.append(run_round(root, cfg, j, force=redo))
    return manifests


# ---------------------------------------------------------------------------
# standalone stages


def filter_detections(cfg: SelfTrainConfig, detections_dir: Path, out_dir: Path,
                      round_index: int) -> RoundManifest:
    """Run one filtering step over an existing detections directory."""
    root = DataRoot(Path(cfg.data_root))
    dets = kitti_io.read_label_dir(Path(detections_dir))
    det_set = LabelSet(dets, round_index)
    clouds = LazyClouds(root)
    pp = _load_pp_map(root)
    arts = round_step(det_set, clouds, pp, cfg.filter)
    out_dir = Path(out_dir)
    kitti_io.write_label_dir(out_dir / "pseudo_labels", arts.pseudo_labels.boxes)
    kitti_io.write_label_dir(out_dir / "db_source", arts.augmentation_labels.boxes)
    manifest = RoundManifest(
        round_index=round_index,
        algorithm=cfg.filter.algorithm.value,
        rho=cfg.filter.rho,
        alpha=cfg.filter.alpha,
        gamma=cfg.filter.gamma,
        threshold=(
            None if arts.threshold_used == float("-inf") else arts.threshold_used
        ),
        seed=cfg.master_seed,
        counts={
            "n_detections": arts.n_detections,
            "n_pp_kept": arts.n_pp_kept,
            "n_pseudo_labels": arts.pseudo_labels.n_boxes(),
            "n_db_source": arts.augmentation_labels.n_boxes(),
        },
        complete=True,
    )
    kitti_io.write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def build_db_from_dir(cfg: SelfTrainConfig, labels_dir: Path, out_dir: Path,
                      round_index: int = 0) -> GtDatabase:
    root = DataRoot(Path(cfg.data_root))
    labels = LabelSet(kitti_io.read_label_dir(Path(labels_dir)), round_index)
    db = build_database(
        LazyClouds(root), labels,
        min_points=cfg.augment.min_db_points, round_index=round_index,
    )
    save_database(db, Path(out_dir))
    return db


def augment_samples(cfg: SelfTrainConfig, labels_dir: Path, db_dir: Path,
                    out_dir: Path, round_index: int = 0) -> dict[str, int]:
    """Write ground-truth-sampled plus globally augmented scenes to out_dir."""
    root = DataRoot(Path(cfg.data_root))
    labels = kitti_io.read_label_dir(Path(labels_dir))
    db = load_database(Path(db_dir))
    out_dir = Path(out_dir)
    inserted: dict[str, int] = {}
    for sid in root.sample_ids():
        rng = sample_rng(cfg.master_seed, _STREAM_AUGMENT, round_index, sid)
        cloud = root.load_reference(sid)
        aug_cloud, aug_labels, n_ins = sample_insert(
            cloud, labels.get(sid, []), db, cfg.augment, rng
        )
        aug_cloud, aug_labels = global_augment(aug_cloud, aug_labels, cfg.augment, rng)
        kitti_io.write_point_bin(out_dir / "points" / f"{sid}.bin", aug_cloud)
        kitti_io.write_label_file(out_dir / "labels" / f"{sid}.txt", aug_labels)
        inserted[sid] = n_ins
    return inserted


def evaluate_dirs(dets_dir: Path, gts_dir: Path, cfg: SelfTrainConfig):
    """Evaluate a detections directory against a ground-truth directory.

    Ground truth defines the sample universe; samples without a detection
    file count as empty. Detection files for unknown samples are an error.
    """
    gts = kitti_io.read_label_dir(Path(gts_dir))
    dets = kitti_io.read_label_dir(Path(dets_dir))
    extra = sorted(set(dets) - set(gts))
    if extra:
        raise DataError(
            "detections for samples without ground truth: " + ", ".join(extra)
        )
    filled = {sid: dets.get(sid, []) for sid in gts}
    return evaluate(LabelSet(filled), LabelSet(gts), cfg.eval)


REPORT_COLUMNS = [
    "round", "algorithm", "rho", "alpha", "gamma", "threshold",
    "n_detections", "n_pp_kept", "n_pseudo_labels", "n_db_source",
    "n_db_entries", "n_db_skipped", "complete",
    "pseudo_precision", "pseudo_recall", "pseudo_f1",
    "db_precision", "db_recall", "db_f1",
]


def report_rounds(rounds_root: Path) -> str:
    """One CSV row per round directory; incomplete rounds are flagged."""
    rounds_root = Path(rounds_root)
    if not rounds_root.is_dir():
        raise DataError(f"rounds directory not found: {rounds_root}")
    round_dirs = sorted(
        (d for d in rounds_root.glob("round_*") if d.is_dir()),
        key=lambda d: int(d.name.split("_")[1]),
    )
    lines = [",".join(REPORT_COLUMNS)]
    for d in round_dirs:
        row = {c: "" for c in REPORT_COLUMNS}
        row["round"] = d.name.split("_")[1]
        manifest_path = d / "manifest.json"
        if manifest_path.exists():
            m = kitti_io.read_manifest(manifest_path)
            row["algorithm"] = m.algorithm
            row["rho"] = f"{m.rho:g}"
            row["alpha"] = f"{m.alpha:g}"
            row["gamma"] = f"{m.gamma:g}"
            row["threshold"] = "" if m.threshold is None else f"{m.threshold:.6f}"
            for key in ("n_detections", "n_pp_kept", "n_pseudo_labels",
                        "n_db_source", "n_db_entries", "n_db_skipped"):
                if key in m.counts:
                    row[key] = str(m.counts[key])
            row["complete"] = str(m.complete).lower()
        else:
            row["complete"] = "false"
        audit_path = d / "audit.json"
        if audit_path.exists():
            with open(audit_path) as f:
                audit = json.load(f)
            for prefix, key in (("pseudo", "pseudo_labels"), ("db", "db_labels")):
                if key in audit:
                    for metric in ("precision", "recall", "f1"):
                        row[f"{prefix}_{metric}"] = f"{audit[key][metric]:.6f}"
        lines.append(",".join(row[c] for c in REPORT_COLUMNS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# simulated detector behind the external protocol


def sim_detector_train(cfg: SelfTrainConfig, points_dir: Path, labels_dir: Path,
                       db_dir: Path, out_dir: Path, round_index: int) -> Path:
    """Train the simulated detector from files and persist its memory."""
    root = DataRoot(Path(points_dir).parent)
    model = _train_sim_model(root, cfg, round_index, Path(labels_dir), Path(db_dir))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "round": round_index,
        "boxes": [kitti_io.box_to_dict(b) for b in model.boxes],
        "scores": model.scores,
    }
    model_path = out_dir / "sim_model.json"
    with open(model_path, "w") as f:
        json.dump(payload, f)
        f.write("\n")
    return model_path


def sim_detector_infer(cfg: SelfTrainConfig, points_dir: Path, out_dir: Path,
                       round_index: int) -> None:
    """Run the persisted simulated detector and write 16-field label files."""
    root = DataRoot(Path(points_dir).parent)
    out_dir = Path(out_dir)
    model_path = out_dir / "sim_model.json"
    if not model_path.exists():
        raise DataError(f"simulated-detector model not found: {model_path}")
    with open(model_path) as f:
        payload = json.load(f)
    model = SimDetectorModel(
        boxes=[kitti_io.box_from_dict(d) for d in payload["boxes"]],
        scores=list(payload["scores"]),
    )
    dets = _sim_detect(root, cfg, round_index, model)
    kitti_io.write_label_dir(out_dir, dets)
