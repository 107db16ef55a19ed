"""Confidence-score and persistence-based filtering of self-training rounds.

Three round-filtering algorithms are supported. All of them first compute a
pooled confidence threshold t as the floor(rho*n)-th smallest score of the
round's detections (before any persistence filtering), then:

  filter_pseudo_labels      -- persistence filter, then keep score > t;
                               the augmentation source equals the result.
  filter_and_keep_static    -- persistence filter but retain removed boxes
                               whose score exceeds high_threshold, then keep
                               score > t; augmentation source equals result.
  filter_data_augmentation  -- persistence filter only; the pseudo-labels are
                               left untouched by the confidence step and only
                               the augmentation source is score-filtered.

Ties at the threshold are removed (the filter is strictly greater-than).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

import numpy as np

from .ephemerality import PPScores
from .errors import DataError
from .geometry import LabeledBox, PointCloud, points_in_box

#: Threshold meaning "nothing filtered" (rho = 0 or k = 0).
SENTINEL_THRESHOLD = float("-inf")

# Guards against float noise in k = floor(rho*n) / k = ceil(frac*n).
_RANK_EPS = 1e-9


class FilterAlgorithm(str, Enum):
    FILTER_PSEUDO_LABELS = "filter_pseudo_labels"
    FILTER_AND_KEEP_STATIC = "filter_and_keep_static"
    FILTER_DATA_AUGMENTATION = "filter_data_augmentation"


@dataclass
class FilterConfig:
    """Parameters of a round-filtering step.

    rho is the fraction of low-score labels to drop (0.20 with
    filter_data_augmentation, 0.25 with the two pseudo-label variants in the
    reference experiments); alpha/gamma control the persistence filter; boxes
    whose alpha-percentile persistence exceeds gamma are treated as static
    background, unless static retention keeps them for score > high_threshold.
    """

    algorithm: FilterAlgorithm = FilterAlgorithm.FILTER_DATA_AUGMENTATION
    rho: float = 0.20
    alpha: float = 0.2
    gamma: float = 0.5
    high_threshold: float = 0.8

    def __post_init__(self):
        self.algorithm = FilterAlgorithm(self.algorithm)
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must be in [0, 1), got {self.rho}")
        for name in ("alpha", "gamma", "high_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class LabelSet:
    """Labeled boxes grouped by sample id, for one self-training round."""

    boxes: dict[str, list[LabeledBox]] = field(default_factory=dict)
    round_index: int = 0

    def n_boxes(self) -> int:
        return sum(len(v) for v in self.boxes.values())

    def sample_ids(self) -> list[str]:
        return sorted(self.boxes)

    def iter_boxes(self) -> Iterable[tuple[str, LabeledBox]]:
        for sid in self.sample_ids():
            for lb in self.boxes[sid]:
                yield sid, lb

    def all_scores(self) -> np.ndarray:
        """Scores of every box, pooled across samples; raises if any is missing."""
        scores = []
        for sid, lb in self.iter_boxes():
            if lb.score is None:
                raise DataError(f"box without confidence score in sample {sid}")
            scores.append(lb.score)
        return np.array(scores, dtype=np.float64)


@dataclass
class RoundArtifacts:
    """Outputs of one filtering round."""

    pseudo_labels: LabelSet
    augmentation_labels: LabelSet
    threshold_used: float
    n_detections: int
    n_pp_kept: int


def nearest_rank_percentile(values: np.ndarray, frac: float) -> float:
    """Nearest-rank percentile: the ceil(frac*n)-th smallest value (1-based).

    frac = 0 returns the minimum; frac = 1 the maximum.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    n = v.size
    if n == 0:
        raise ValueError("percentile of an empty set")
    k = math.ceil(frac * n - _RANK_EPS)
    k = min(max(k, 1), n)
    return float(v[k - 1])


def percentile_threshold(scores: np.ndarray, rho: float) -> float:
    """Pooled confidence threshold: the floor(rho*n)-th smallest score.

    Returns SENTINEL_THRESHOLD when floor(rho*n) == 0, so that a subsequent
    strictly-greater filter keeps everything.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise DataError("cannot compute a score threshold from an empty score set")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must be in [0, 1), got {rho}")
    k = math.floor(rho * s.size + _RANK_EPS)
    if k == 0:
        return SENTINEL_THRESHOLD
    return float(np.sort(s)[k - 1])


def filter_by_confidence(labels: LabelSet, t: float) -> LabelSet:
    """Keep exactly the boxes with score > t; grouping and order preserved."""
    out: dict[str, list[LabeledBox]] = {}
    for sid in labels.sample_ids():
        kept = []
        for lb in labels.boxes[sid]:
            if lb.score is None:
                raise DataError(f"box without confidence score in sample {sid}")
            if lb.score > t:
                kept.append(lb)
        out[sid] = kept
    return LabelSet(out, labels.round_index)


def _pp_removal_masks(
    labels: LabelSet,
    clouds: Mapping[str, PointCloud],
    pp: Mapping[str, PPScores],
    alpha: float,
    gamma: float,
) -> dict[str, np.ndarray]:
    """Per-sample boolean mask: True where the persistence filter removes a box.

    A box is removed when the alpha-percentile of the persistence scores of
    the reference points inside it exceeds gamma, or when it contains no
    points at all.
    """
    masks: dict[str, np.ndarray] = {}
    for sid in labels.sample_ids():
        if sid not in pp or sid not in clouds:
            raise DataError(f"missing persistence scores for sample {sid}")
        cloud = clouds[sid]
        values = pp[sid].values
        if len(values) != len(cloud):
            raise DataError(
                f"persistence sidecar of sample {sid} has {len(values)} entries "
                f"for {len(cloud)} points"
            )
        mask = np.zeros(len(labels.boxes[sid]), dtype=bool)
        for i, lb in enumerate(labels.boxes[sid]):
            inside = points_in_box(cloud, lb.box)
            if inside.size == 0:
                mask[i] = True
            else:
                mask[i] = nearest_rank_percentile(values[inside], alpha) > gamma
        masks[sid] = mask
    return masks


def filter_by_pp(
    labels: LabelSet,
    clouds: Mapping[str, PointCloud],
    pp: Mapping[str, PPScores],
    alpha: float = 0.2,
    gamma: float = 0.5,
) -> tuple[LabelSet, LabelSet]:
    """Split labels into (kept, removed) by the persistence-score test."""
    masks = _pp_removal_masks(labels, clouds, pp, alpha, gamma)
    kept: dict[str, list[LabeledBox]] = {}
    removed: dict[str, list[LabeledBox]] = {}
    for sid in labels.sample_ids():
        mask = masks[sid]
        kept[sid] = [lb for lb, rm in zip(labels.boxes[sid], mask) if not rm]
        removed[sid] = [lb for lb, rm in zip(labels.boxes[sid], mask) if rm]
    return (LabelSet(kept, labels.round_index), LabelSet(removed, labels.round_index))


def filter_by_pp_keep_static(
    labels: LabelSet,
    clouds: Mapping[str, PointCloud],
    pp: Mapping[str, PPScores],
    alpha: float = 0.2,
    gamma: float = 0.5,
    high_threshold: float = 0.8,
) -> LabelSet:
    """Persistence filter with static retention.

    Boxes the persistence test would remove are kept anyway when their
    confidence exceeds high_threshold: confidently detected parked objects
    look static to the persistence scores but are worth keeping.
    """
    masks = _pp_removal_masks(labels, clouds, pp, alpha, gamma)
    out: dict[str, list[LabeledBox]] = {}
    for sid in labels.sample_ids():
        kept = []
        for lb, rm in zip(labels.boxes[sid], masks[sid]):
            if not rm:
                kept.append(lb)
            else:
                if lb.score is None:
                    raise DataError(f"box without confidence score in sample {sid}")
                if lb.score > high_threshold:
                    kept.append(lb)
        out[sid] = kept
    return LabelSet(out, labels.round_index)


def round_step(
    detections: LabelSet,
    clouds: Mapping[str, PointCloud],
    pp: Mapping[str, PPScores],
    cfg: FilterConfig,
) -> RoundArtifacts:
    """Apply the configured algorithm to one round of detections.

    The confidence threshold is always computed from the full detection set
    before the persistence filter runs.
    """
    t = percentile_threshold(detections.all_scores(), cfg.rho)
    kept, _removed = filter_by_pp(detections, clouds, pp, cfg.alpha, cfg.gamma)
    alg = cfg.algorithm
    if alg is FilterAlgorithm.FILTER_PSEUDO_LABELS:
        pseudo = filter_by_confidence(kept, t)
        db_source = pseudo
    elif alg is FilterAlgorithm.FILTER_AND_KEEP_STATIC:
        retained = filter_by_pp_keep_static(
            detections, clouds, pp, cfg.alpha, cfg.gamma, cfg.high_threshold
        )
        pseudo = filter_by_confidence(retained, t)
        db_source = pseudo
    else:
        pseudo = kept
        db_source = filter_by_confidence(kept, t)
    return RoundArtifacts(
        pseudo_labels=pseudo,
        augmentation_labels=db_source,
        threshold_used=t,
        n_detections=detections.n_boxes(),
        n_pp_kept=kept.n_boxes(),
    )
