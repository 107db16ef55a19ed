"""Label-free LiDAR self-training toolkit.

Seed labels from multi-traversal persistence scores, confidence-score
filtering of self-training rounds, ground-truth-sampling augmentation, and
range-binned average-precision evaluation, with a pluggable detector
boundary (built-in simulated detector or an external command protocol).
"""

from .geometry import (
    Box3D,
    LabeledBox,
    PointCloud,
    Pose,
    apply_pose,
    iou_3d,
    iou_bev,
    points_in_box,
)
from .ephemerality import PPScores, TraversalSet, compute_pp_scores, neighbor_counts
from .filtering import (
    FilterAlgorithm,
    FilterConfig,
    LabelSet,
    RoundArtifacts,
    filter_by_confidence,
    filter_by_pp,
    filter_by_pp_keep_static,
    percentile_threshold,
    round_step,
)
from .seed_labels import ClusterParams, SeedHeuristics, dbscan, fit_box, generate_seed_labels
from .gt_database import AugmentConfig, DbEntry, GtDatabase, build_database, global_augment, sample_insert
from .evaluation import EvalConfig, EvalReport, average_precision, evaluate, match_detections
from .sim import SimDetectorParams, WorldConfig, gen_world, sim_infer, sim_train
from .config import SelfTrainConfig

__version__ = "0.1.0"
