"""Readers and writers for every on-disk format of the pipeline.

Point files are little-endian float32 quadruples (x, y, z, intensity). Label
files are KITTI-format lines, but the geometry lives in the LiDAR frame (x
forward, y left, z up) rather than KITTI's camera frame: the location fields
hold the box geometric center and the rotation field holds the yaw about +z.
The unused 2D fields are kept syntactically present (alpha = -10,
bbox = -1 -1 -1 -1) so stock KITTI tooling can still parse the files.

Data-root layout, per sample id (zero-padded decimal string):

    points/<id>.bin          reference scan, sensor frame
    traversals/<id>/<k>.bin  past traversals, sensor frames
    poses/<id>.txt           row-major 4x4 rigid transforms to the world
                             frame: line 0 for the reference, line k+1 for
                             traversal k
    pp/<id>.bin              persistence sidecar, one float32 per reference
                             point in file order
    <stage>/<id>.txt         label files (gt/, seed labels, detections, ...)

Round artifacts live under rounds/round_<j>/{pseudo_labels,db,detections}
next to a manifest.json.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ephemerality import PPScores, TraversalSet
from .errors import DataError, FormatError
from .geometry import Box3D, LabeledBox, PointCloud, Pose, apply_pose

POINT_RECORD_BYTES = 16
_POSE_ORTHO_TOL = 1e-4


# ---------------------------------------------------------------------------
# point / persistence binaries


def read_point_bin(path: Path) -> PointCloud:
    path = Path(path)
    size = path.stat().st_size
    if size % POINT_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {size} bytes is not a multiple of {POINT_RECORD_BYTES}"
        )
    raw = np.fromfile(path, dtype="<f4") if size else np.zeros(0, dtype="<f4")
    arr = raw.reshape(-1, 4).astype(np.float64)
    if not np.isfinite(arr).all():
        bad = int(np.flatnonzero(~np.isfinite(arr).all(axis=1))[0])
        raise FormatError(f"{path}: non-finite value at point {bad}")
    try:
        return PointCloud.from_array(arr)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_point_bin(path: Path, cloud: PointCloud) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cloud.to_array().astype("<f4").tofile(path)


def read_pp_bin(path: Path) -> PPScores:
    path = Path(path)
    size = path.stat().st_size
    if size % 4 != 0:
        raise FormatError(f"{path}: size {size} bytes is not a multiple of 4")
    raw = np.fromfile(path, dtype="<f4") if size else np.zeros(0, dtype="<f4")
    try:
        return PPScores(raw.astype(np.float64))
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e


def write_pp_bin(path: Path, pp: PPScores) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pp.values.astype("<f4").tofile(path)


# ---------------------------------------------------------------------------
# label files


def _parse_label_line(line: str, path: Path, lineno: int) -> LabeledBox:
    fields = line.split()
    if len(fields) not in (15, 16):
        raise FormatError(
            f"{path}:{lineno}: expected 15 or 16 fields, got {len(fields)}"
        )
    try:
        values = [float(v) for v in fields[1:]]
    except ValueError as e:
        raise FormatError(f"{path}:{lineno}: unparsable number: {e}") from e
    h, w, l = values[7], values[8], values[9]
    x, y, z, yaw = values[10], values[11], values[12], values[13]
    score = values[14] if len(fields) == 16 else None
    try:
        box = Box3D(x, y, z, l, w, h, yaw)
        return LabeledBox(box, label=fields[0], score=score)
    except ValueError as e:
        raise FormatError(f"{path}:{lineno}: {e}") from e


def read_label_file(path: Path) -> list[LabeledBox]:
    path = Path(path)
    labels = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            labels.append(_parse_label_line(line, path, lineno))
    return labels


def format_label_line(lb: LabeledBox) -> str:
    b = lb.box
    parts = [
        lb.label,
        "0.00", "0", "-10.00",
        "-1.00", "-1.00", "-1.00", "-1.00",
        f"{b.height:.4f}", f"{b.width:.4f}", f"{b.length:.4f}",
        f"{b.cx:.4f}", f"{b.cy:.4f}", f"{b.cz:.4f}",
        f"{b.yaw:.4f}",
    ]
    if lb.score is not None:
        parts.append(f"{lb.score:.4f}")
    return " ".join(parts)


def write_label_file(path: Path, labels: list[LabeledBox]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for lb in labels:
            f.write(format_label_line(lb) + "\n")


def read_label_dir(directory: Path) -> dict[str, list[LabeledBox]]:
    """Label files of a directory keyed by sample id (file stem)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"label directory not found: {directory}")
    return {
        p.stem: read_label_file(p) for p in sorted(directory.glob("*.txt"))
    }


def write_label_dir(directory: Path, labels: dict[str, list[LabeledBox]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sid, lbs in labels.items():
        write_label_file(directory / f"{sid}.txt", lbs)


# ---------------------------------------------------------------------------
# pose files


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def read_pose_file(path: Path) -> list[Pose]:
    """Parse one 4x4 row-major rigid transform per line.

    Rotations are validated to 1e-4 (text files cannot hit the Pose type's
    1e-6 invariant) and then projected onto the nearest exact rotation.
    """
    path = Path(path)
    poses = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 16:
                raise FormatError(f"{path}:{lineno}: expected 16 floats, got {len(fields)}")
            try:
                m = np.array([float(v) for v in fields]).reshape(4, 4)
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: unparsable number: {e}") from e
            if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-9):
                raise FormatError(f"{path}:{lineno}: last row must be 0 0 0 1")
            r = m[:3, :3]
            if not np.allclose(r.T @ r, np.eye(3), atol=_POSE_ORTHO_TOL):
                raise FormatError(f"{path}:{lineno}: rotation is not orthonormal")
            if abs(np.linalg.det(r) - 1.0) > _POSE_ORTHO_TOL:
                raise FormatError(f"{path}:{lineno}: rotation determinant is not +1")
            poses.append(Pose(_orthonormalize(r), m[:3, 3]))
    return poses


def write_pose_file(path: Path, poses: list[Pose]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for pose in poses:
            f.write(" ".join(f"{v:.12g}" for v in pose.to_matrix().ravel()) + "\n")


# ---------------------------------------------------------------------------
# box <-> json


def box_to_dict(box: Box3D) -> dict:
    return {
        "cx": box.cx, "cy": box.cy, "cz": box.cz,
        "length": box.length, "width": box.width, "height": box.height,
        "yaw": box.yaw,
    }


def box_from_dict(d: dict) -> Box3D:
    return Box3D(d["cx"], d["cy"], d["cz"], d["length"], d["width"], d["height"], d["yaw"])


# ---------------------------------------------------------------------------
# data root


@dataclass
class DataRoot:
    """Accessor for the sample-oriented directory layout."""

    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def points_dir(self) -> Path:
        return self.root / "points"

    @property
    def pp_dir(self) -> Path:
        return self.root / "pp"

    @property
    def poses_dir(self) -> Path:
        return self.root / "poses"

    @property
    def traversals_dir(self) -> Path:
        return self.root / "traversals"

    @property
    def gt_dir(self) -> Path:
        return self.root / "gt"

    @property
    def rounds_dir(self) -> Path:
        return self.root / "rounds"

    def sample_ids(self) -> list[str]:
        if not self.points_dir.is_dir():
            raise DataError(f"no points directory under {self.root}")
        ids = sorted(p.stem for p in self.points_dir.glob("*.bin"))
        if not ids:
            raise DataError(f"no point files under {self.points_dir}")
        for sid in ids:
            if not sid.isdigit():
                raise DataError(f"sample id is not a zero-padded decimal string: {sid}")
        return ids

    def point_path(self, sid: str) -> Path:
        return self.points_dir / f"{sid}.bin"

    def pp_path(self, sid: str) -> Path:
        return self.pp_dir / f"{sid}.bin"

    def pose_path(self, sid: str) -> Path:
        return self.poses_dir / f"{sid}.txt"

    def traversal_paths(self, sid: str) -> list[Path]:
        d = self.traversals_dir / sid
        if not d.is_dir():
            raise DataError(f"no traversals for sample {sid} under {d}")
        return sorted(d.glob("*.bin"), key=lambda p: int(p.stem))

    def load_reference(self, sid: str) -> PointCloud:
        """Reference scan in the world frame."""
        cloud = read_point_bin(self.point_path(sid))
        poses = self._poses(sid)
        return apply_pose(cloud, poses[0])

    def load_traversal_set(self, sid: str) -> TraversalSet:
        """Reference plus past traversals, all mapped into the world frame."""
        poses = self._poses(sid)
        trav_paths = self.traversal_paths(sid)
        if len(poses) != 1 + len(trav_paths):
            raise DataError(
                f"sample {sid}: {len(poses)} poses for {len(trav_paths)} traversals "
                "(need one for the reference plus one per traversal)"
            )
        reference = apply_pose(read_point_bin(self.point_path(sid)), poses[0])
        traversals = [
            apply_pose(read_point_bin(p), pose)
            for p, pose in zip(trav_paths, poses[1:])
        ]
        return TraversalSet(sid, reference, traversals)

    def load_pp(self, sid: str) -> PPScores:
        path = self.pp_path(sid)
        if not path.exists():
            raise DataError(f"missing persistence sidecar for sample {sid}: {path}")
        return read_pp_bin(path)

    def _poses(self, sid: str) -> list[Pose]:
        path = self.pose_path(sid)
        if not path.exists():
            raise DataError(f"missing pose file for sample {sid}: {path}")
        poses = read_pose_file(path)
        if not poses:
            raise DataError(f"pose file of sample {sid} is empty")
        return poses


# ---------------------------------------------------------------------------
# round layout + manifest


@dataclass
class RoundDirs:
    round_dir: Path
    pseudo_labels: Path
    db: Path
    detections: Path
    manifest_path: Path


@dataclass
class RoundManifest:
    """Everything needed to reproduce one round given the master seed."""

    round_index: int
    algorithm: str
    rho: float
    alpha: float
    gamma: float
    threshold: float | None
    seed: int
    counts: dict[str, int] = field(default_factory=dict)
    complete: bool = False

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "algorithm": self.algorithm,
            "rho": self.rho,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "threshold": self.threshold,
            "seed": self.seed,
            "counts": dict(self.counts),
            "complete": self.complete,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundManifest":
        return cls(
            round_index=d["round_index"],
            algorithm=d["algorithm"],
            rho=d["rho"],
            alpha=d["alpha"],
            gamma=d["gamma"],
            threshold=d["threshold"],
            seed=d["seed"],
            counts=dict(d.get("counts", {})),
            complete=d.get("complete", False),
        )


def write_manifest(path: Path, manifest: RoundManifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: Path) -> RoundManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path) as f:
        try:
            return RoundManifest.from_dict(json.load(f))
        except (json.JSONDecodeError, KeyError) as e:
            raise FormatError(f"{path}: bad manifest: {e}") from e


def round_layout(rounds_root: Path, j: int, force: bool = False) -> RoundDirs:
    """Create rounds/round_<j>/{pseudo_labels,db,detections}.

    An existing non-empty round directory is an error unless force is set.
    """
    if j < 0:
        raise ValueError("round index must be >= 0")
    rounds_root = Path(rounds_root)
    round_dir = rounds_root / f"round_{j}"
    if round_dir.exists() and any(round_dir.iterdir()):
        if not force:
            raise DataError(
                f"round directory already exists (use --force to overwrite): {round_dir}"
            )
        shutil.rmtree(round_dir)
    dirs = RoundDirs(
        round_dir=round_dir,
        pseudo_labels=round_dir / "pseudo_labels",
        db=round_dir / "db",
        detections=round_dir / "detections",
        manifest_path=round_dir / "manifest.json",
    )
    for d in (dirs.pseudo_labels, dirs.db, dirs.detections):
        d.mkdir(parents=True, exist_ok=True)
    return dirs
