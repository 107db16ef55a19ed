"""Pseudo ground-truth database and ground-truth-sampling augmentation.

Database entries are object point sets cropped out of their source scans and
stored in a box-local canonical frame (centered, yaw-aligned). Sampling
re-inserts them at their original world pose into training scenes until the
scene holds the target number of labels, rejecting any BEV overlap with the
boxes already present. Global augmentation (flip / rotate / scale) is applied
consistently to points and boxes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import DataError, FormatError
from .filtering import LabelSet
from .geometry import (
    Box3D,
    LabeledBox,
    PointCloud,
    box_flipped_y,
    box_rotated_z,
    box_scaled,
    iou_bev,
    points_in_bev_footprint,
    points_in_box,
    rotate_points_z,
)
from . import kitti_io


@dataclass(frozen=True)
class DbEntry:
    """One cropped object: box at its original world pose, points canonical."""

    entry_id: str
    source_sample_id: str
    box: Box3D
    score: float
    points: PointCloud

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError(f"entry {self.entry_id} has no points")

    def world_points(self) -> PointCloud:
        """Entry points placed back at the original world pose."""
        return PointCloud(self.box.to_world(self.points.xyz), self.points.intensity)


@dataclass
class GtDatabase:
    """Immutable-once-built collection of augmentation objects."""

    entries: list[DbEntry] = field(default_factory=list)
    round_index: int = 0
    manifest_ref: str = ""
    skipped_sparse: int = 0

    def __post_init__(self):
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate entry ids in database")

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class AugmentConfig:
    """Ground-truth-sampling and global-augmentation parameters."""

    target_labels_per_sample: int = 40
    flip_probability: float = 0.5
    rotation_range: float = math.pi / 4
    scale_range: tuple[float, float] = (0.95, 1.05)
    perception_range: float = 70.0
    min_db_points: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        if self.target_labels_per_sample < 0:
            raise ValueError("target_labels_per_sample must be >= 0")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must be in [0, 1]")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be >= 0")
        if len(self.scale_range) != 2 or self.scale_range[0] <= 0:
            raise ValueError("scale_range must be two positive factors")
        if self.scale_range[0] > self.scale_range[1]:
            raise ValueError("scale_range must be ordered")


def build_database(
    clouds: Mapping[str, PointCloud],
    labels: LabelSet,
    min_points: int = 5,
    round_index: int = 0,
    manifest_ref: str = "",
) -> GtDatabase:
    """Crop one DbEntry per label; labels with fewer interior points are skipped.

    Points are stored in the box-local canonical frame via the same transform
    the membership test uses, so every stored point lies inside the canonical
    box exactly.
    """
    entries: list[DbEntry] = []
    skipped = 0
    for sid in labels.sample_ids():
        if sid not in clouds:
            raise DataError(f"missing point cloud for sample {sid}")
        cloud = clouds[sid]
        for i, lb in enumerate(labels.boxes[sid]):
            if lb.score is None:
                raise DataError(f"box without confidence score in sample {sid}")
            inside = points_in_box(cloud, lb.box)
            if inside.size < min_points:
                skipped += 1
                continue
            local = lb.box.to_local(cloud.xyz[inside])
            entries.append(
                DbEntry(
                    entry_id=f"{sid}_{i:04d}",
                    source_sample_id=sid,
                    box=lb.box,
                    score=lb.score,
                    points=PointCloud(local, cloud.intensity[inside]),
                )
            )
    return GtDatabase(entries, round_index, manifest_ref, skipped)


def sample_insert(
    cloud: PointCloud,
    labels: list[LabeledBox],
    db: GtDatabase,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[PointCloud, list[LabeledBox], int]:
    """Insert database objects until the scene holds the target label count.

    Entries are drawn uniformly without replacement and placed at their
    original world pose. An entry is rejected when its box has any BEV
    overlap with a box already in the scene, or when its center lies beyond
    the perception range. On acceptance the scene points under the inserted
    box's BEV footprint are deleted and the entry's points added.

    Returns the augmented cloud, the augmented label list, and the number of
    inserted objects.
    """
    target = cfg.target_labels_per_sample
    if len(labels) >= target:
        return cloud, list(labels), 0
    out_labels = list(labels)
    boxes_now = [lb.box for lb in out_labels]
    inserted = 0
    for idx in rng.permutation(len(db.entries)):
        if len(out_labels) >= target:
            break
        entry = db.entries[int(idx)]
        if entry.box.bev_range > cfg.perception_range:
            continue
        if any(iou_bev(entry.box, b) > 0.0 for b in boxes_now):
            continue
        footprint = points_in_bev_footprint(cloud.xyz, entry.box)
        if footprint.any():
            cloud = cloud.subset(~footprint)
        cloud = cloud.concat(entry.world_points())
        lb = LabeledBox(entry.box, score=entry.score)
        out_labels.append(lb)
        boxes_now.append(entry.box)
        inserted += 1
    return cloud, out_labels, inserted


def global_augment(
    cloud: PointCloud,
    labels: list[LabeledBox],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[PointCloud, list[LabeledBox]]:
    """Random y-flip, yaw rotation, and uniform scaling of the whole scene.

    The same transform is applied to points and boxes, in the order
    flip -> rotate -> scale. Intensities are untouched.
    """
    flip = rng.random() < cfg.flip_probability
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])

    xyz = cloud.xyz
    boxes = [lb.box for lb in labels]
    if flip:
        xyz = xyz.copy()
        xyz[:, 1] = -xyz[:, 1]
        boxes = [box_flipped_y(b) for b in boxes]
    xyz = rotate_points_z(xyz, angle)
    boxes = [box_rotated_z(b, angle) for b in boxes]
    xyz = xyz * scale
    boxes = [box_scaled(b, scale) for b in boxes]
    out_labels = [
        LabeledBox(b, label=lb.label, score=lb.score) for b, lb in zip(boxes, labels)
    ]
    return PointCloud(xyz, cloud.intensity), out_labels


def save_database(db: GtDatabase, out_dir: Path) -> None:
    """Write index.json plus one canonical-frame point file per entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {
        "round_index": db.round_index,
        "manifest_ref": db.manifest_ref,
        "skipped_sparse": db.skipped_sparse,
        "entries": [],
    }
    for e in db.entries:
        points_file = f"{e.entry_id}.bin"
        kitti_io.write_point_bin(out_dir / points_file, e.points)
        index["entries"].append(
            {
                "entry_id": e.entry_id,
                "source_sample_id": e.source_sample_id,
                "box": kitti_io.box_to_dict(e.box),
                "score": e.score,
                "points_file": points_file,
                "num_points": len(e.points),
            }
        )
    with open(out_dir / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")


def load_database(db_dir: Path) -> GtDatabase:
    """Read a database written by save_database."""
    db_dir = Path(db_dir)
    index_path = db_dir / "index.json"
    if not index_path.exists():
        raise DataError(f"database index not found: {index_path}")
    with open(index_path) as f:
        index = json.load(f)
    entries = []
    for rec in index["entries"]:
        points = kitti_io.read_point_bin(db_dir / rec["points_file"])
        if len(points) != rec["num_points"]:
            raise FormatError(
                f"entry {rec['entry_id']}: index says {rec['num_points']} points, "
                f"file has {len(points)}"
            )
        entries.append(
            DbEntry(
                entry_id=rec["entry_id"],
                source_sample_id=rec["source_sample_id"],
                box=kitti_io.box_from_dict(rec["box"]),
                score=rec["score"],
                points=points,
            )
        )
    return GtDatabase(
        entries,
        round_index=index.get("round_index", 0),
        manifest_ref=index.get("manifest_ref", ""),
        skipped_sparse=index.get("skipped_sparse", 0),
    )
