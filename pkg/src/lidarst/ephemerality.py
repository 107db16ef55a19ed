"""Per-point persistence scores of a reference scan from aligned past traversals.

The persistence score of a reference point is the normalized entropy of its
neighbor-count distribution across the past traversals: points whose local
neighborhood is populated evenly in every traversal (static background) score
near 1, points seen in no past traversal (ephemeral objects) score 0. The
reference scan itself is excluded from the counts, otherwise a mobile object
would always match itself.

Neighbor search uses a uniform voxel grid with cell size equal to the query
radius and a 27-cell neighborhood, which finds exactly the same neighbor sets
as a brute-force scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

DEFAULT_RADIUS = 0.3


@dataclass(frozen=True)
class TraversalSet:
    """One reference scan plus N past traversals, all in a common world frame."""

    sample_id: str
    reference: PointCloud
    traversals: list[PointCloud]

    def __post_init__(self):
        if len(self.traversals) < 1:
            raise ValueError("at least one past traversal is required")
        if len(self.reference) == 0:
            raise ValueError("reference cloud is empty")
        for k, t in enumerate(self.traversals):
            if len(t) == 0:
                raise ValueError(f"traversal {k} is empty")

    @property
    def n_traversals(self) -> int:
        return len(self.traversals)


@dataclass(frozen=True)
class PPScores:
    """One persistence score per reference point, each in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ValueError("persistence scores must be finite")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("persistence scores must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]


class VoxelGrid:
    """Uniform hash grid over 3D points, cell size equal to the query radius."""

    def __init__(self, xyz: np.ndarray, cell: float):
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.xyz = xyz
        self.cell = cell
        self._buckets: dict[tuple[int, int, int], np.ndarray] = {}
        if xyz.shape[0] == 0:
            return
        cells = np.floor(xyz / cell).astype(np.int64)
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        sorted_cells = cells[order]
        change = np.flatnonzero(np.any(np.diff(sorted_cells, axis=0), axis=1)) + 1
        starts = np.concatenate([[0], change, [len(order)]])
        for s, e in zip(starts[:-1], starts[1:]):
            key = tuple(sorted_cells[s])
            self._buckets[key] = order[s:e]

    def candidates(self, cell: tuple[int, int, int]) -> np.ndarray:
        """Point indices in the 27-cell neighborhood of `cell`."""
        chunks = []
        cx, cy, cz = cell
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    got = self._buckets.get((cx + dx, cy + dy, cz + dz))
                    if got is not None:
                        chunks.append(got)
        if not chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(chunks)


def neighbor_counts(reference: PointCloud, traversal: PointCloud,
                    radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """Count traversal points within `radius` of each reference point.

    Distances are Euclidean with the boundary included (d <= radius).
    Reference points are processed grouped by grid cell so the candidate
    set is gathered once per occupied cell.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    ref = reference.xyz
    counts = np.zeros(ref.shape[0], dtype=np.int64)
    if traversal.xyz.shape[0] == 0:
        return counts
    grid = VoxelGrid(traversal.xyz, radius)
    r2 = radius * radius
    ref_cells = np.floor(ref / radius).astype(np.int64)
    order = np.lexsort((ref_cells[:, 2], ref_cells[:, 1], ref_cells[:, 0]))
    sorted_cells = ref_cells[order]
    change = np.flatnonzero(np.any(np.diff(sorted_cells, axis=0), axis=1)) + 1
    starts = np.concatenate([[0], change, [len(order)]])
    for s, e in zip(starts[:-1], starts[1:]):
        members = order[s:e]
        cand = grid.candidates(tuple(sorted_cells[s]))
        if cand.size == 0:
            continue
        diff = ref[members][:, None, :] - traversal.xyz[cand][None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        counts[members] = np.sum(d2 <= r2, axis=1)
    return counts


def pp_from_counts(counts: np.ndarray) -> np.ndarray:
    """Persistence scores from a (n_traversals, n_points) count matrix.

    Per point: C = sum of counts. C == 0 -> 0. With a single traversal the
    score is 1 when the count is positive, else 0. Otherwise the score is
    the natural-log entropy of the count distribution divided by ln(N).
    """
    counts = np.asarray(counts, dtype=np.float64)
    n_trav = counts.shape[0]
    total = counts.sum(axis=0)
    if n_trav == 1:
        return (counts[0] > 0).astype(np.float64)
    q = counts / np.maximum(total, 1.0)
    entropy = -np.sum(np.where(q > 0.0, q * np.log(np.maximum(q, 1e-300)), 0.0), axis=0)
    pp = entropy / np.log(n_trav)
    pp[total == 0] = 0.0
    return np.clip(pp, 0.0, 1.0)


def compute_pp_scores(ts: TraversalSet, radius: float = DEFAULT_RADIUS) -> PPScores:
    """Persistence scores of the reference scan against all past traversals."""
    counts = np.stack(
        [neighbor_counts(ts.reference, t, radius) for t in ts.traversals]
    )
    return PPScores(pp_from_counts(counts))
