"""Class-agnostic average precision over IoU thresholds and depth ranges.

AP uses 40-point interpolation (mean over recall levels 1/40 .. 40/40 of the
maximum precision achieved at or beyond each level). For every range bin,
detections and ground truths are filtered by the BEV distance of their box
center from the origin before matching, and matching is greedy per sample in
descending score order. Empty bins follow the convention AP = 1 with no
detections and AP = 0 otherwise.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .filtering import LabelSet
from .geometry import LabeledBox, iou_3d, iou_bev

RECALL_LEVELS = 40


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.25, 0.5)
    metrics: tuple[str, ...] = ("bev", "3d")
    range_bins: tuple[tuple[float, float], ...] = (
        (0.0, 30.0), (30.0, 50.0), (50.0, 80.0), (0.0, 80.0),
    )

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))
        object.__setattr__(self, "metrics", tuple(self.metrics))
        object.__setattr__(
            self, "range_bins", tuple(tuple(b) for b in self.range_bins)
        )
        for thr in self.iou_thresholds:
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"iou threshold must be in (0, 1], got {thr}")
        for m in self.metrics:
            if m not in ("bev", "3d"):
                raise ValueError(f"unknown metric {m!r}")
        for lo, hi in self.range_bins:
            if lo < 0 or hi <= lo:
                raise ValueError(f"bad range bin ({lo}, {hi})")


@dataclass
class EvalRow:
    metric: str
    iou: float
    bin_lo: float
    bin_hi: float
    ap: float
    num_gt: int
    num_det: int


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_predicted_objects: float
    n_samples: int

    def ap(self, metric: str, iou: float, bin_: tuple[float, float]) -> float:
        for r in self.rows:
            if (r.metric, r.iou, (r.bin_lo, r.bin_hi)) == (metric, iou, tuple(bin_)):
                return r.ap
        raise KeyError(f"no row for ({metric}, {iou}, {bin_})")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("metric,iou,bin_lo,bin_hi,ap,num_gt,num_det\n")
        for r in self.rows:
            buf.write(
                f"{r.metric},{r.iou:g},{r.bin_lo:g},{r.bin_hi:g},"
                f"{r.ap:.6f},{r.num_gt},{r.num_det}\n"
            )
        return buf.getvalue()


def _iou_fn(metric: str):
    if metric == "bev":
        return iou_bev
    if metric == "3d":
        return iou_3d
    raise ValueError(f"unknown metric {metric!r}")


def match_detections(
    dets: list[LabeledBox],
    gts: list[LabeledBox],
    iou_thr: float,
    metric: str = "bev",
) -> np.ndarray:
    """Greedy TP/FP assignment; returns a bool array aligned with `dets`.

    Detections are visited in descending score order (ties broken by input
    index) and matched to the unmatched ground truth of highest IoU >= the
    threshold (IoU ties go to the lower ground-truth index).
    """
    n = len(dets)
    tp = np.zeros(n, dtype=bool)
    if n == 0:
        return tp
    scores = []
    for lb in dets:
        if lb.score is None:
            raise DataError("detection without confidence score")
        scores.append(lb.score)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    fn = _iou_fn(metric)
    gt_taken = [False] * len(gts)
    for di in order:
        best_iou = 0.0
        best_gi = -1
        for gi, gt in enumerate(gts):
            if gt_taken[gi]:
                continue
            v = fn(dets[di].box, gt.box)
            if v >= iou_thr and v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi >= 0:
            gt_taken[best_gi] = True
            tp[di] = True
    return tp


def average_precision(
    scores: np.ndarray, tp_flags: np.ndarray, num_gt: int
) -> float:
    """40-point interpolated AP from pooled per-detection records."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    tp_flags = np.asarray(tp_flags, dtype=bool).reshape(-1)
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    if num_gt == 0:
        return 1.0 if scores.size == 0 else 0.0
    if scores.size == 0:
        return 0.0
    order = np.lexsort((np.arange(scores.size), -scores))
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    total = 0.0
    for i in range(1, RECALL_LEVELS + 1):
        level = i / RECALL_LEVELS
        reachable = precision[recall >= level]
        total += float(reachable.max()) if reachable.size else 0.0
    return total / RECALL_LEVELS


def _filter_by_range(
    boxes: list[LabeledBox], lo: float, hi: float
) -> list[LabeledBox]:
    return [lb for lb in boxes if lo <= lb.box.bev_range < hi]


def evaluate(dets: LabelSet, gts: LabelSet, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """AP per (metric, IoU threshold, range bin) plus mean detections per sample."""
    det_ids = set(dets.boxes)
    gt_ids = set(gts.boxes)
    if det_ids != gt_ids:
        orphans = sorted(det_ids.symmetric_difference(gt_ids))
        raise DataError(
            "detection and ground-truth sample ids differ; orphans: "
            + ", ".join(orphans)
        )
    sample_ids = sorted(gt_ids)
    if not sample_ids:
        raise DataError("no samples to evaluate")

    rows = []
    for metric in cfg.metrics:
        for iou_thr in cfg.iou_thresholds:
            for lo, hi in cfg.range_bins:
                pooled_scores: list[float] = []
                pooled_tp: list[bool] = []
                num_gt = 0
                num_det = 0
                for sid in sample_ids:
                    d = _filter_by_range(dets.boxes[sid], lo, hi)
                    g = _filter_by_range(gts.boxes[sid], lo, hi)
                    num_gt += len(g)
                    num_det += len(d)
                    flags = match_detections(d, g, iou_thr, metric)
                    pooled_scores.extend(lb.score for lb in d)
                    pooled_tp.extend(bool(x) for x in flags)
                ap = average_precision(
                    np.array(pooled_scores), np.array(pooled_tp), num_gt
                )
                rows.append(EvalRow(metric, iou_thr, lo, hi, ap, num_gt, num_det))
    mean_pred = dets.n_boxes() / len(sample_ids)
    return EvalReport(rows, mean_pred, len(sample_ids))


@dataclass
class PrSummary:
    """Precision/recall of a label set against ground truth at one IoU."""

    tp: int
    fp: int
    num_gt: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.num_gt if self.num_gt else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0


def precision_recall(
    labels: LabelSet,
    gts: LabelSet,
    iou_thr: float = 0.25,
    metric: str = "bev",
) -> PrSummary:
    """Set-level precision/recall audit (for pseudo-label quality tables)."""
    tp = 0
    fp = 0
    num_gt = 0
    for sid in sorted(gts.boxes):
        g = gts.boxes[sid]
        d = labels.boxes.get(sid, [])
        num_gt += len(g)
        flags = match_detections(d, g, iou_thr, metric)
        tp += int(flags.sum())
        fp += int((~flags).sum())
    return PrSummary(tp, fp, num_gt)
