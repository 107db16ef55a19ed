"""Rotated-box and point-cloud geometry primitives.

Conventions used everywhere, including file I/O: right-handed LiDAR frame
with x forward, y left, z up; yaw is a counterclockwise rotation about +z,
normalized to (-pi, pi]. Points on a box face count as inside (comparisons
use <=), so cropping is deterministic.

All operations here are pure functions on immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Tolerance for collinear edges in polygon clipping.
CLIP_EPS = 1e-9
# Orthonormality tolerance for Pose construction.
POSE_TOL = 1e-6


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.remainder(yaw, math.tau)
    if w <= -math.pi:
        w += math.tau
    return w


def rot_z(angle: float) -> np.ndarray:
    """3x3 rotation matrix for a counterclockwise rotation about +z."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_points_z(xyz: np.ndarray, angle: float) -> np.ndarray:
    """Rotate (N, 2) or (N, 3) points counterclockwise about +z."""
    c, s = math.cos(angle), math.sin(angle)
    out = xyz.copy()
    out[:, 0] = c * xyz[:, 0] - s * xyz[:, 1]
    out[:, 1] = s * xyz[:, 0] + c * xyz[:, 1]
    return out


@dataclass(frozen=True)
class PointCloud:
    """Per-point 3D positions plus intensity.

    Attributes:
        xyz: (N, 3) float64 array, all coordinates finite.
        intensity: (N,) float64 array, reflectance in [0, 1].

    The arrays are treated as immutable; operations return new clouds.
    """

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        xyz = np.ascontiguousarray(np.asarray(self.xyz, dtype=np.float64))
        intensity = np.ascontiguousarray(np.asarray(self.intensity, dtype=np.float64))
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must have shape (N, 3), got {xyz.shape}")
        if intensity.shape != (xyz.shape[0],):
            raise ValueError(
                f"intensity must have shape ({xyz.shape[0]},), got {intensity.shape}"
            )
        if not np.isfinite(xyz).all():
            bad = int(np.flatnonzero(~np.isfinite(xyz).all(axis=1))[0])
            raise ValueError(f"non-finite coordinate at point index {bad}")
        if not np.isfinite(intensity).all():
            bad = int(np.flatnonzero(~np.isfinite(intensity))[0])
            raise ValueError(f"non-finite intensity at point index {bad}")
        if intensity.size and (intensity.min() < 0.0 or intensity.max() > 1.0):
            bad = int(np.flatnonzero((intensity < 0) | (intensity > 1))[0])
            raise ValueError(f"intensity outside [0, 1] at point index {bad}")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0,)))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PointCloud":
        """Build from an (N, 4) array of x, y, z, intensity."""
        arr = np.asarray(arr, dtype=np.float64).reshape(-1, 4)
        return cls(arr[:, :3], arr[:, 3])

    def to_array(self) -> np.ndarray:
        return np.column_stack([self.xyz, self.intensity])

    def subset(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz[indices], self.intensity[indices])

    def concat(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(
            np.vstack([self.xyz, other.xyz]),
            np.concatenate([self.intensity, other.intensity]),
        )


@dataclass(frozen=True)
class Pose:
    """Rigid transform p -> R @ p + t.

    rotation must be orthonormal with determinant +1 within 1e-6.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=POSE_TOL):
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > POSE_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-6")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    def to_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return xyz @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return the pose applying `other` first, then `self`."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)


@dataclass(frozen=True)
class Box3D:
    """Yaw-rotated 3D box: geometric center, extents, heading.

    length is the extent along the heading (local x), width along local y,
    height along z. Yaw is normalized to (-pi, pi] at construction.
    """

    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.cz, self.length, self.width, self.height, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box parameter: {vals}")
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"box dimensions must be positive, got "
                f"l={self.length} w={self.width} h={self.height}"
            )
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def bev_area(self) -> float:
        return self.length * self.width

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def z_min(self) -> float:
        return self.cz - self.height / 2.0

    @property
    def z_max(self) -> float:
        return self.cz + self.height / 2.0

    @property
    def bev_range(self) -> float:
        """BEV distance of the center from the origin."""
        return math.hypot(self.cx, self.cy)

    def corners_bev(self) -> np.ndarray:
        """(4, 2) BEV corners in counterclockwise order."""
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        """Map world points into the box frame (center at origin, x along heading)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        d = xyz - self.center
        out = np.empty_like(d)
        out[:, 0] = c * d[:, 0] + s * d[:, 1]
        out[:, 1] = -s * d[:, 0] + c * d[:, 1]
        out[:, 2] = d[:, 2]
        return out

    def to_world(self, local: np.ndarray) -> np.ndarray:
        """Inverse of to_local."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(local)
        out[:, 0] = c * local[:, 0] - s * local[:, 1]
        out[:, 1] = s * local[:, 0] + c * local[:, 1]
        out[:, 2] = local[:, 2]
        return out + self.center


@dataclass(frozen=True)
class LabeledBox:
    """A box with the pipeline's single class label and optional confidence.

    Ground-truth boxes carry score=None; detector outputs and pseudo-labels
    carry a score in [0, 1].
    """

    box: Box3D
    label: str = "Dynamic"
    score: float | None = None

    def __post_init__(self):
        if self.score is not None:
            if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
                raise ValueError(f"score must be in [0, 1], got {self.score}")


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (N, 2) vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of `subject` against convex CCW polygon `clip`."""
    output = [subject[i] for i in range(len(subject))]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a = clip[i]
        b = clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = output
        output = []
        prev = inp[-1]
        prev_in = ex * (prev[1] - a[1]) - ey * (prev[0] - a[0]) >= -CLIP_EPS
        for cur in inp:
            cur_in = ex * (cur[1] - a[1]) - ey * (cur[0] - a[0]) >= -CLIP_EPS
            if cur_in:
                if not prev_in:
                    output.append(_line_intersection(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_line_intersection(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _line_intersection(p, q, a, b) -> np.ndarray:
    """Intersection of segment p-q with the infinite line through a-b."""
    d1 = (q[0] - p[0], q[1] - p[1])
    d2 = (b[0] - a[0], b[1] - a[1])
    denom = d2[0] * d1[1] - d2[1] * d1[0]
    if abs(denom) < 1e-300:
        return np.array([p[0], p[1]])
    t = (d2[0] * (a[1] - p[1]) - d2[1] * (a[0] - p[0])) / denom
    return np.array([p[0] + t * d1[0], p[1] + t * d1[1]])


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    """Overlap area of the two yaw-rotated BEV rectangles."""
    inter = _clip_polygon(a.corners_bev(), b.corners_bev())
    return _polygon_area(inter)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Bird's-eye-view IoU of two yaw-rotated boxes, in [0, 1]."""
    inter = bev_intersection_area(a, b)
    union = a.bev_area + b.bev_area - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """3D IoU: BEV intersection times vertical overlap, over the volume union."""
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def points_in_box(cloud: PointCloud, box: Box3D) -> np.ndarray:
    """Indices of cloud points inside the box (faces inclusive), ascending."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=np.int64)
    local = box.to_local(cloud.xyz)
    inside = (
        (np.abs(local[:, 0]) <= box.length / 2.0)
        & (np.abs(local[:, 1]) <= box.width / 2.0)
        & (np.abs(local[:, 2]) <= box.height / 2.0)
    )
    return np.flatnonzero(inside)


def points_in_bev_footprint(xyz: np.ndarray, box: Box3D) -> np.ndarray:
    """Boolean mask of points whose BEV position falls in the box footprint."""
    if xyz.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = xyz[:, 0] - box.cx
    dy = xyz[:, 1] - box.cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= box.length / 2.0) & (np.abs(ly) <= box.width / 2.0)


def apply_pose(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Map every point p -> R @ p + t; intensity preserved."""
    return PointCloud(pose.apply(cloud.xyz), cloud.intensity)


def box_translated(box: Box3D, dx: float, dy: float, dz: float) -> Box3D:
    return Box3D(box.cx + dx, box.cy + dy, box.cz + dz,
                 box.length, box.width, box.height, box.yaw)


def box_rotated_z(box: Box3D, angle: float) -> Box3D:
    """Rotate the box about the world origin by `angle` (counterclockwise)."""
    c, s = math.cos(angle), math.sin(angle)
    return Box3D(
        c * box.cx - s * box.cy,
        s * box.cx + c * box.cy,
        box.cz,
        box.length, box.width, box.height,
        box.yaw + angle,
    )


def box_flipped_y(box: Box3D) -> Box3D:
    """Mirror the box across the x-z plane (y -> -y)."""
    return Box3D(box.cx, -box.cy, box.cz,
                 box.length, box.width, box.height, -box.yaw)


def box_scaled(box: Box3D, s: float) -> Box3D:
    """Scale center and dimensions by a uniform positive factor."""
    return Box3D(box.cx * s, box.cy * s, box.cz * s,
                 box.length * s, box.width * s, box.height * s, box.yaw)
