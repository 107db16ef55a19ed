"""Synthetic multi-traversal worlds and a simulated detector.

The generator builds flat-ground scenes with static structures, static
objects (present in every traversal) and mobile objects (present only in the
reference scan, or repositioned per traversal), with per-traversal sensor
noise. Ground truth covers both static and mobile objects, each flagged.

The detector double is a similarity memory, not a learner: it memorizes the
boxes it was trained on and detects a ground-truth object with a probability
that grows with the number of similarly-sized boxes in memory. True-positive
scores follow Beta(5, 2) and false-positive scores Beta(2, 5) by default, so
confidence filtering has a real signal to work with; localization jitter
shrinks as the score grows.

All randomness is drawn from generators derived from (seed, stream, sample),
so parallel and serial runs agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ephemerality import TraversalSet
from .errors import ConfigError
from .filtering import LabelSet
from .geometry import Box3D, LabeledBox, PointCloud, iou_bev

CAT_BACKGROUND = 0
CAT_STATIC_OBJECT = 1
CAT_MOBILE_OBJECT = 2

_PLACEMENT_TRIES = 200


@dataclass
class WorldConfig:
    n_samples: int = 4
    area: tuple[float, float] = (50.0, 50.0)
    n_traversals: int = 4
    background_density: float = 6.0
    n_structures: int = 3
    n_static_objects: int = 4
    n_mobile_objects: int = 6
    length_range: tuple[float, float] = (3.2, 4.8)
    width_range: tuple[float, float] = (1.6, 2.2)
    height_range: tuple[float, float] = (1.4, 1.9)
    object_point_density: float = 60.0
    object_sill: float = 0.3
    sensor_noise_sigma: float = 0.02
    mobile_reposition: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        self.area = tuple(self.area)
        self.length_range = tuple(self.length_range)
        self.width_range = tuple(self.width_range)
        self.height_range = tuple(self.height_range)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.n_traversals < 1:
            raise ValueError("n_traversals must be >= 1")
        for name in ("background_density", "object_point_density"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sensor_noise_sigma < 0:
            raise ValueError("sensor_noise_sigma must be >= 0")


@dataclass(frozen=True)
class SimObject:
    box: Box3D
    is_mobile: bool


@dataclass
class SimSample:
    traversal_set: TraversalSet
    objects: list[SimObject]
    categories: np.ndarray  # uint8 per reference point


@dataclass
class SimWorld:
    samples: list[SimSample]
    config: WorldConfig


def _sample_box(rng: np.random.Generator, cfg: WorldConfig,
                existing: list[Box3D]) -> Box3D:
    """Draw a non-overlapping object box with its bottom on the ground."""
    ax, ay = cfg.area
    for _ in range(_PLACEMENT_TRIES):
        length = rng.uniform(*cfg.length_range)
        width = rng.uniform(*cfg.width_range)
        height = rng.uniform(*cfg.height_range)
        margin = math.hypot(length, width) / 2.0
        cx = rng.uniform(-ax / 2 + margin, ax / 2 - margin)
        cy = rng.uniform(-ay / 2 + margin, ay / 2 - margin)
        yaw = rng.uniform(-math.pi, math.pi)
        box = Box3D(cx, cy, height / 2.0, length, width, height, yaw)
        if all(iou_bev(box, b) == 0.0 for b in existing):
            return box
    raise ConfigError(
        "could not place a non-overlapping object; the area is too dense"
    )


def _sample_structure(rng: np.random.Generator, cfg: WorldConfig,
                      existing: list[Box3D]) -> Box3D:
    """Thin wall-like static structure."""
    ax, ay = cfg.area
    for _ in range(_PLACEMENT_TRIES):
        length = rng.uniform(2.0, 6.0)
        width = rng.uniform(0.2, 0.5)
        height = rng.uniform(1.5, 2.5)
        margin = math.hypot(length, width) / 2.0
        cx = rng.uniform(-ax / 2 + margin, ax / 2 - margin)
        cy = rng.uniform(-ay / 2 + margin, ay / 2 - margin)
        yaw = rng.uniform(-math.pi, math.pi)
        box = Box3D(cx, cy, height / 2.0, length, width, height, yaw)
        if all(iou_bev(box, b) == 0.0 for b in existing):
            return box
    raise ConfigError("could not place a structure; the area is too dense")


def _object_points(rng: np.random.Generator, box: Box3D, cfg: WorldConfig) -> np.ndarray:
    """Points in the box volume, starting above the sill height."""
    n = max(30, int(round(cfg.object_point_density * box.length * box.width)))
    z_lo = min(cfg.object_sill, 0.6 * box.height)
    local = np.column_stack([
        rng.uniform(-box.length / 2, box.length / 2, n),
        rng.uniform(-box.width / 2, box.width / 2, n),
        rng.uniform(z_lo - box.height / 2, box.height / 2, n),
    ])
    return box.to_world(local)


def _noisy(rng: np.random.Generator, base: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return base.copy()
    return base + rng.normal(0.0, sigma, base.shape)


def gen_world(cfg: WorldConfig) -> SimWorld:
    """Deterministic synthetic world for the configured seed."""
    samples = []
    for s in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.rng_seed, 0, s])
        ax, ay = cfg.area
        n_ground = int(round(cfg.background_density * ax * ay))
        ground = np.column_stack([
            rng.uniform(-ax / 2, ax / 2, n_ground),
            rng.uniform(-ay / 2, ay / 2, n_ground),
            np.zeros(n_ground),
        ])

        placed: list[Box3D] = []
        structures = []
        for _ in range(cfg.n_structures):
            box = _sample_structure(rng, cfg, placed)
            placed.append(box)
            structures.append(box)
        static_objects = []
        for _ in range(cfg.n_static_objects):
            box = _sample_box(rng, cfg, placed)
            placed.append(box)
            static_objects.append(box)
        mobile_objects = []
        for _ in range(cfg.n_mobile_objects):
            box = _sample_box(rng, cfg, placed)
            placed.append(box)
            mobile_objects.append(box)

        structure_pts = (
            np.vstack([_object_points(rng, b, cfg) for b in structures])
            if structures else np.zeros((0, 3))
        )
        static_pts = (
            np.vstack([_object_points(rng, b, cfg) for b in static_objects])
            if static_objects else np.zeros((0, 3))
        )
        mobile_pts = (
            np.vstack([_object_points(rng, b, cfg) for b in mobile_objects])
            if mobile_objects else np.zeros((0, 3))
        )
        background = np.vstack([ground, structure_pts])

        sigma = cfg.sensor_noise_sigma
        ref_xyz = np.vstack([
            _noisy(rng, background, sigma),
            _noisy(rng, static_pts, sigma),
            _noisy(rng, mobile_pts, sigma),
        ])
        categories = np.concatenate([
            np.full(len(background), CAT_BACKGROUND, dtype=np.uint8),
            np.full(len(static_pts), CAT_STATIC_OBJECT, dtype=np.uint8),
            np.full(len(mobile_pts), CAT_MOBILE_OBJECT, dtype=np.uint8),
        ])
        reference = PointCloud(ref_xyz, rng.uniform(0.0, 1.0, len(ref_xyz)))

        traversals = []
        for _t in range(cfg.n_traversals):
            parts = [_noisy(rng, background, sigma), _noisy(rng, static_pts, sigma)]
            if cfg.mobile_reposition and mobile_objects:
                trav_placed = list(placed)
                for mb in mobile_objects:
                    moved = _sample_box(rng, cfg, trav_placed)
                    trav_placed.append(moved)
                    parts.append(_noisy(rng, _object_points(rng, moved, cfg), sigma))
            xyz = np.vstack(parts)
            traversals.append(PointCloud(xyz, rng.uniform(0.0, 1.0, len(xyz))))

        objects = [SimObject(b, False) for b in static_objects] + [
            SimObject(b, True) for b in mobile_objects
        ]
        samples.append(
            SimSample(
                TraversalSet(f"{s:06d}", reference, traversals),
                objects,
                categories,
            )
        )
    return SimWorld(samples, cfg)


def gt_label_set(world: SimWorld, mobile_only: bool = False) -> LabelSet:
    """Ground truth as a LabelSet (scores absent)."""
    boxes = {}
    for sample in world.samples:
        sid = sample.traversal_set.sample_id
        boxes[sid] = [
            LabeledBox(o.box)
            for o in sample.objects
            if o.is_mobile or not mobile_only
        ]
    return LabelSet(boxes)


# ---------------------------------------------------------------------------
# simulated detector


@dataclass
class SimDetectorParams:
    p0: float = 0.25
    eta: float = 0.01
    p_min: float = 0.05
    p_max: float = 0.95
    fp_per_scene: float = 2.0
    tp_score_a: float = 5.0
    tp_score_b: float = 2.0
    fp_score_a: float = 2.0
    fp_score_b: float = 5.0
    size_tolerance: float = 0.15
    jitter_sigma: float = 1.0
    fp_range: float = 20.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p0", "p_min", "p_max"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.p_min > self.p_max:
            raise ValueError("p_min must not exceed p_max")
        for name in ("tp_score_a", "tp_score_b", "fp_score_a", "fp_score_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.fp_per_scene < 0:
            raise ValueError("fp_per_scene must be >= 0")


@dataclass
class SimDetectorModel:
    """Multiset of training boxes; the detector's entire state."""

    boxes: list[Box3D] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def dims(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 3))
        return np.array([[b.length, b.width, b.height] for b in self.boxes])


def detection_probability(n_sim: int, params: SimDetectorParams) -> float:
    """Deterministic, monotone non-decreasing in the similar-box count."""
    return float(np.clip(params.p0 + params.eta * n_sim,
                         params.p_min, params.p_max))


def count_similar(model: SimDetectorModel, box: Box3D,
                  tolerance: float) -> int:
    """Memory boxes whose every dimension is within the relative tolerance."""
    dims = model.dims()
    if dims.shape[0] == 0:
        return 0
    target = np.array([box.length, box.width, box.height])
    rel = np.abs(dims - target) / target
    return int(np.sum(np.all(rel <= tolerance, axis=1)))


def sim_train(labels: LabelSet, params: SimDetectorParams) -> SimDetectorModel:
    """Memorize the training boxes (pure function of its inputs)."""
    model = SimDetectorModel()
    for _sid, lb in labels.iter_boxes():
        model.boxes.append(lb.box)
        model.scores.append(lb.score if lb.score is not None else 1.0)
    return model


def sim_infer(
    model: SimDetectorModel,
    scene_objects: list[LabeledBox],
    params: SimDetectorParams,
    rng: np.random.Generator,
) -> list[LabeledBox]:
    """Noisy detections of the scene's objects plus Poisson false positives."""
    dets: list[LabeledBox] = []
    for lb in scene_objects:
        n_sim = count_similar(model, lb.box, params.size_tolerance)
        p = detection_probability(n_sim, params)
        if rng.random() >= p:
            continue
        score = float(rng.beta(params.tp_score_a, params.tp_score_b))
        sig = params.jitter_sigma * (1.0 - score)
        dx, dy = rng.normal(0.0, sig, 2)
        dz = rng.normal(0.0, 0.3 * sig)
        dyaw = rng.normal(0.0, 0.2 * sig)
        factors = np.clip(1.0 + rng.normal(0.0, 0.1 * sig, 3), 0.5, 1.5)
        b = lb.box
        box = Box3D(
            b.cx + dx, b.cy + dy, b.cz + dz,
            b.length * factors[0], b.width * factors[1], b.height * factors[2],
            b.yaw + dyaw,
        )
        dets.append(LabeledBox(box, score=score))
    for _ in range(rng.poisson(params.fp_per_scene)):
        length = rng.uniform(3.0, 5.0)
        width = rng.uniform(1.6, 2.0)
        height = rng.uniform(1.4, 1.8)
        cx, cy = rng.uniform(-params.fp_range, params.fp_range, 2)
        yaw = rng.uniform(-math.pi, math.pi)
        score = float(rng.beta(params.fp_score_a, params.fp_score_b))
        dets.append(
            LabeledBox(Box3D(cx, cy, height / 2, length, width, height, yaw),
                       score=score)
        )
    return dets
