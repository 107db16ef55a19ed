"""Seed bounding boxes from persistence-scored clusters.

Reference points are stripped of ground, clustered with DBSCAN in a 4D
feature space (x, y, z, weighted persistence score), and clusters that look
ephemeral and object-sized are fitted with minimum-area rotated rectangles.
Every seed label gets confidence 1.0 so that round-0 score filtering is a
no-op.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .ephemerality import PPScores, TraversalSet
from .filtering import nearest_rank_percentile
from .geometry import Box3D, LabeledBox, PointCloud, iou_bev, normalize_yaw

# Fitted boxes are grown by this much per side so the cluster's own points
# stay inside under the face-inclusive membership test despite float rounding.
FIT_PADDING = 1e-6
# Padding of the degenerate-cluster fallback box.
DEGENERATE_PADDING = 0.05
# Minimum box extent along any axis.
MIN_EXTENT = 1e-3


@dataclass
class ClusterParams:
    """DBSCAN parameters over (x, y, z, pp_weight * persistence)."""

    eps: float = 1.0
    min_pts: int = 10
    pp_weight: float = 5.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.min_pts < 1:
            raise ValueError("min_pts must be >= 1")
        if self.pp_weight < 0:
            raise ValueError("pp_weight must be >= 0")


@dataclass
class SeedHeuristics:
    """Cluster acceptance thresholds; all values are configuration."""

    min_cluster_points: int = 10
    max_bottom_above_ground: float = 1.0
    min_bev_diagonal: float = 0.5
    max_bev_diagonal: float = 15.0
    cluster_pp_percentile: float = 0.5
    cluster_pp_max: float = 0.3
    ground_grid_cell: float = 1.0
    ground_band: float = 0.2
    duplicate_iou: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.cluster_pp_percentile <= 1.0:
            raise ValueError("cluster_pp_percentile must be in [0, 1]")
        if self.min_bev_diagonal > self.max_bev_diagonal:
            raise ValueError("min_bev_diagonal exceeds max_bev_diagonal")
        if self.ground_grid_cell <= 0:
            raise ValueError("ground_grid_cell must be positive")


def dbscan(features: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Standard DBSCAN; returns a cluster id per point, -1 for noise.

    A point counts toward its own eps-neighborhood. Border points join the
    first cluster that reaches them when points are scanned in input-index
    order, which makes the labeling deterministic for a fixed input order.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(feats)
    neighborhoods = [np.sort(np.asarray(ix, dtype=np.int64))
                     for ix in tree.query_ball_point(feats, eps)]
    core = np.array([len(ix) >= min_pts for ix in neighborhoods])
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            for k in neighborhoods[j]:
                if labels[k] == -1:
                    labels[k] = cluster
                    if core[k]:
                        queue.append(k)
        cluster += 1
    return labels


class GroundMap:
    """Per-BEV-cell ground height; empty cells inherit the nearest non-empty cell."""

    def __init__(self, x0: float, y0: float, cell: float, heights: np.ndarray):
        self.x0 = x0
        self.y0 = y0
        self.cell = cell
        self.heights = heights

    def query(self, xy: np.ndarray) -> np.ndarray:
        """Ground height under each (N, 2) BEV position (clamped to the grid)."""
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        ix = np.clip(
            np.floor((xy[:, 0] - self.x0) / self.cell).astype(np.int64),
            0, self.heights.shape[0] - 1,
        )
        iy = np.clip(
            np.floor((xy[:, 1] - self.y0) / self.cell).astype(np.int64),
            0, self.heights.shape[1] - 1,
        )
        return self.heights[ix, iy]


def estimate_ground_z(cloud: PointCloud, grid_cell: float = 1.0) -> GroundMap:
    """Ground height map: per cell, the 5th percentile of point z."""
    if grid_cell <= 0:
        raise ValueError("grid_cell must be positive")
    if len(cloud) == 0:
        raise ValueError("cannot estimate ground from an empty cloud")
    xy = cloud.xyz[:, :2]
    x0, y0 = float(xy[:, 0].min()), float(xy[:, 1].min())
    nx = int(np.floor((xy[:, 0].max() - x0) / grid_cell)) + 1
    ny = int(np.floor((xy[:, 1].max() - y0) / grid_cell)) + 1
    ix = np.minimum(np.floor((xy[:, 0] - x0) / grid_cell).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor((xy[:, 1] - y0) / grid_cell).astype(np.int64), ny - 1)
    flat = ix * ny + iy
    order = np.argsort(flat, kind="stable")
    heights = np.full((nx, ny), np.nan)
    sorted_flat = flat[order]
    starts = np.concatenate(
        [[0], np.flatnonzero(np.diff(sorted_flat)) + 1, [len(order)]]
    )
    z = cloud.xyz[:, 2]
    for s, e in zip(starts[:-1], starts[1:]):
        cell_id = sorted_flat[s]
        heights[cell_id // ny, cell_id % ny] = np.percentile(z[order[s:e]], 5)
    missing = np.isnan(heights)
    if missing.any():
        valid_idx = np.argwhere(~missing)
        missing_idx = np.argwhere(missing)
        tree = cKDTree(valid_idx.astype(np.float64))
        _, nearest = tree.query(missing_idx.astype(np.float64))
        heights[missing_idx[:, 0], missing_idx[:, 1]] = heights[
            valid_idx[nearest, 0], valid_idx[nearest, 1]
        ]
    return GroundMap(x0, y0, grid_cell, heights)


def _convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counterclockwise, collinear points dropped."""
    pts = np.unique(np.asarray(pts, dtype=np.float64), axis=0)
    n = pts.shape[0]
    if n <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _min_area_rect(hull: np.ndarray) -> tuple[float, float, float, float, float]:
    """Rotating calipers over hull edges: (cx, cy, extent_x, extent_y, angle)."""
    best = None
    m = hull.shape[0]
    for i in range(m):
        ex, ey = hull[(i + 1) % m] - hull[i]
        theta = math.atan2(ey, ex)
        c, s = math.cos(-theta), math.sin(-theta)
        xs = c * hull[:, 0] - s * hull[:, 1]
        ys = s * hull[:, 0] + c * hull[:, 1]
        w = xs.max() - xs.min()
        h = ys.max() - ys.min()
        area = w * h
        if best is None or area < best[0]:
            mid_local = np.array([(xs.max() + xs.min()) / 2, (ys.max() + ys.min()) / 2])
            cc, cs = math.cos(theta), math.sin(theta)
            cx = cc * mid_local[0] - cs * mid_local[1]
            cy = cs * mid_local[0] + cc * mid_local[1]
            best = (area, cx, cy, w, h, theta)
    assert best is not None
    _, cx, cy, w, h, theta = best
    return cx, cy, w, h, theta


def fit_box(cluster: PointCloud, ground_z: float) -> Box3D:
    """Minimum-area rotated BEV rectangle, grown vertically from the ground.

    The BEV rectangle is the minimum-area rotated bounding rectangle of the
    cluster's convex hull; the box reaches from ground_z (or the lowest
    cluster point, if lower) to the highest point. Degenerate clusters whose
    BEV projection is collinear fall back to an axis-aligned box padded by
    0.05 m per side. The reported yaw lies in (-pi/2, pi/2] with
    length >= width (the heading of a point cluster is only defined mod pi).
    """
    xyz = cluster.xyz
    if xyz.shape[0] == 0:
        raise ValueError("cannot fit a box to an empty cluster")
    z_top = float(xyz[:, 2].max())
    z_bot = min(ground_z, float(xyz[:, 2].min()))
    height = max(z_top - z_bot, MIN_EXTENT) + 2 * FIT_PADDING
    cz = (z_top + z_bot) / 2.0

    hull = _convex_hull_2d(xyz[:, :2])
    if hull.shape[0] < 3:
        lo = xyz[:, :2].min(axis=0) - DEGENERATE_PADDING
        hi = xyz[:, :2].max(axis=0) + DEGENERATE_PADDING
        cx, cy = (lo + hi) / 2.0
        dx, dy = hi - lo
        if dx >= dy:
            return Box3D(cx, cy, cz, dx, dy, height, 0.0)
        return Box3D(cx, cy, cz, dy, dx, height, math.pi / 2)

    cx, cy, w, h, theta = _min_area_rect(hull)
    if w >= h:
        length, width, yaw = w, h, theta
    else:
        length, width, yaw = h, w, theta + math.pi / 2
    yaw = normalize_yaw(yaw)
    if yaw <= -math.pi / 2:
        yaw += math.pi
    elif yaw > math.pi / 2:
        yaw -= math.pi
    return Box3D(
        cx, cy, cz,
        max(length, MIN_EXTENT) + 2 * FIT_PADDING,
        max(width, MIN_EXTENT) + 2 * FIT_PADDING,
        height,
        yaw,
    )


def generate_seed_labels(
    ts: TraversalSet,
    pp: PPScores,
    cp: ClusterParams,
    h: SeedHeuristics,
) -> list[LabeledBox]:
    """Cluster non-ground reference points and keep ephemeral, object-sized boxes.

    Keeps clusters with at least min_cluster_points members whose
    cluster_pp_percentile persistence is at most cluster_pp_max, whose bottom
    sits within max_bottom_above_ground of the local ground, and whose BEV
    diagonal lies in [min_bev_diagonal, max_bev_diagonal]. Near-duplicate
    boxes (BEV IoU above duplicate_iou) are resolved in favor of the larger
    cluster. All seed labels carry score 1.0.
    """
    ref = ts.reference
    if len(pp) != len(ref):
        raise ValueError(
            f"{len(pp)} persistence scores for {len(ref)} reference points"
        )
    ground = estimate_ground_z(ref, h.ground_grid_cell)
    gz = ground.query(ref.xyz[:, :2])
    above = ref.xyz[:, 2] - gz > h.ground_band
    keep_idx = np.flatnonzero(above)
    if keep_idx.size == 0:
        return []

    feats = np.column_stack(
        [ref.xyz[keep_idx], cp.pp_weight * pp.values[keep_idx]]
    )
    labels = dbscan(feats, cp.eps, cp.min_pts)

    candidates: list[tuple[int, Box3D, int]] = []
    for cid in range(labels.max() + 1 if labels.size else 0):
        members = keep_idx[labels == cid]
        if members.size < h.min_cluster_points:
            continue
        cluster_pp = pp.values[members]
        if nearest_rank_percentile(cluster_pp, h.cluster_pp_percentile) > h.cluster_pp_max:
            continue
        xyz = ref.xyz[members]
        centroid = xyz[:, :2].mean(axis=0)
        local_ground = float(ground.query(centroid[None, :])[0])
        bottom = float(xyz[:, 2].min())
        if bottom - local_ground > h.max_bottom_above_ground:
            continue
        box = fit_box(ref.subset(members), local_ground)
        diagonal = math.hypot(box.length, box.width)
        if not h.min_bev_diagonal <= diagonal <= h.max_bev_diagonal:
            continue
        candidates.append((cid, box, int(members.size)))

    # Suppress near-duplicates from split clusters: larger cluster wins.
    by_size = sorted(candidates, key=lambda c: (-c[2], c[0]))
    kept: list[tuple[int, Box3D, int]] = []
    for cand in by_size:
        if all(iou_bev(cand[1], k[1]) <= h.duplicate_iou for k in kept):
            kept.append(cand)
    kept.sort(key=lambda c: c[0])
    return [LabeledBox(box, score=1.0) for _, box, _ in kept]
