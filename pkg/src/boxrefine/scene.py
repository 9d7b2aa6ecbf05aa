"""Synthetic LiDAR-style scenes: labeled cuboid objects over ground clutter.

Objects are hollow cuboid shells sampled on the faces visible from the
sensor origin (back-face culled), so the generated clouds have the one
property the refiner relies on: points concentrate on box surfaces.
Coarse detections are simulated by adding box-space Gaussian noise whose
per-parameter scale is a fraction of the true box extents, which keeps
the noise process invariant under uniform scene scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import PointCloud, nbv_inverse_points, nbv_points, wrap_angle
from .iou import bev_iou
from .rng import substream

_SIZE_CLAMP = 0.1  # perturbed extents never drop below this fraction of the original
_CLUTTER_FRACTION = 0.1  # clutter points per ground point
_CLUTTER_ZMAX = 3.0
_MIN_SENSOR_CLEARANCE = 2.0
_PLACEMENT_RETRIES = 40


@dataclass(frozen=True)
class SizeDistribution:
    """Mean/std of (w, l, h) extents for one object class, in meters."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if any(m <= 0 for m in self.mean):
            raise DataError("size means must be positive")
        if any(s < 0 for s in self.std):
            raise DataError("size stds must be non-negative")


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the scene generator."""

    object_count: tuple[int, int] = (2, 6)
    classes: dict[str, SizeDistribution] = field(
        default_factory=lambda: {"car": SizeDistribution(mean=(1.9, 4.6, 1.7), std=(0.10, 0.23, 0.09))}
    )
    region: tuple[tuple[float, float], tuple[float, float]] = ((4.0, 46.0), (-18.0, 18.0))
    sensor_origin: tuple[float, float, float] = (0.0, 0.0, 1.8)
    surface_density: float = 40.0  # points per m^2 of visible face
    background_density: float = 1.0  # ground points per m^2
    dropout: float = 0.1
    noise_std: float = 0.02

    def __post_init__(self):
        if self.object_count[0] < 0 or self.object_count[1] < self.object_count[0]:
            raise DataError(f"bad object_count range {self.object_count}")
        if self.surface_density < 0 or self.background_density < 0:
            raise DataError("densities must be non-negative")
        if not (0.0 <= self.dropout < 1.0):
            raise DataError("dropout must lie in [0, 1)")
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")
        if not self.classes:
            raise DataError("at least one object class required")

    def to_dict(self) -> dict:
        return {
            "object_count": list(self.object_count),
            "classes": {k: {"mean": list(v.mean), "std": list(v.std)} for k, v in sorted(self.classes.items())},
            "region": [list(self.region[0]), list(self.region[1])],
            "sensor_origin": list(self.sensor_origin),
            "surface_density": self.surface_density,
            "background_density": self.background_density,
            "dropout": self.dropout,
            "noise_std": self.noise_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            object_count=tuple(d["object_count"]),
            classes={k: SizeDistribution(mean=tuple(v["mean"]), std=tuple(v["std"])) for k, v in d["classes"].items()},
            region=(tuple(d["region"][0]), tuple(d["region"][1])),
            sensor_origin=tuple(d["sensor_origin"]),
            surface_density=float(d["surface_density"]),
            background_density=float(d["background_density"]),
            dropout=float(d["dropout"]),
            noise_std=float(d["noise_std"]),
        )


@dataclass
class Scene:
    """A labeled point cloud plus its ground-truth boxes."""

    cloud: PointCloud
    gt_boxes: np.ndarray  # (K, 7)
    gt_classes: list[str]
    sensor_origin: np.ndarray  # (3,)
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class PerturbationModel:
    """Per-parameter box-noise scales.

    Center and size entries are fractions of the true box extents
    (x, y, z paired with l, w, h; each size with its own extent); the yaw
    entry is in radians. These are the square roots of the diagonal noise
    covariance, applied per unit noise level.
    """

    center_frac: tuple[float, float, float] = (0.15, 0.15, 0.08)
    size_frac: tuple[float, float, float] = (0.15, 0.15, 0.08)
    yaw_std: float = 0.15

    def __post_init__(self):
        if any(v < 0 for v in (*self.center_frac, *self.size_frac, self.yaw_std)):
            raise DataError("noise scales must be non-negative")

    def scales(self, box) -> np.ndarray:
        """Per-parameter noise std for unit noise level, in box units."""
        b = np.asarray(box, dtype=np.float64)
        w, l, h = b[3], b[4], b[5]
        cf, sf = self.center_frac, self.size_frac
        return np.array([cf[0] * l, cf[1] * w, cf[2] * h, sf[0] * w, sf[1] * l, sf[2] * h, self.yaw_std])

    def to_dict(self) -> dict:
        return {"center_frac": list(self.center_frac), "size_frac": list(self.size_frac), "yaw_std": self.yaw_std}

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationModel":
        return cls(center_frac=tuple(d["center_frac"]), size_frac=tuple(d["size_frac"]), yaw_std=float(d["yaw_std"]))


@dataclass
class Detection:
    """A simulated coarse detection; source_gt is kept for analysis only."""

    box: np.ndarray
    confidence: float
    cls: str = "car"
    source_gt: int | None = None


# Body-frame outward normals and in-plane axes of the six cuboid faces.
_FACES = (
    # (normal axis, sign, u axis, v axis)
    (0, 1.0, 1, 2),
    (0, -1.0, 1, 2),
    (1, 1.0, 0, 2),
    (1, -1.0, 0, 2),
    (2, 1.0, 0, 1),
    (2, -1.0, 0, 1),
)


def _sample_object_shell(box: np.ndarray, sensor: np.ndarray, density: float, rng: np.random.Generator) -> np.ndarray:
    """Sample points on the faces of `box` visible from `sensor` (world frame)."""
    w, l, h = box[3], box[4], box[5]
    half = np.array([l / 2.0, w / 2.0, h / 2.0])  # body x, y, z
    c, s = np.cos(box[6]), np.sin(box[6])
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    chunks = []
    for axis, sign, ua, va in _FACES:
        normal_world = rot[:, axis] * sign
        center_body = np.zeros(3)
        center_body[axis] = sign * half[axis]
        center_world = rot @ center_body + box[:3]
        if np.dot(normal_world, sensor - center_world) <= 0.0:
            continue
        area = 4.0 * half[ua] * half[va]
        count = rng.poisson(area * density)
        if count == 0:
            continue
        body = np.zeros((count, 3))
        body[:, axis] = sign * half[axis]
        body[:, ua] = rng.uniform(-half[ua], half[ua], size=count)
        body[:, va] = rng.uniform(-half[va], half[va], size=count)
        chunks.append(body @ rot.T + box[:3])
    if not chunks:
        return np.zeros((0, 3))
    return np.concatenate(chunks, axis=0)


def sample_scene(spec: SceneSpec, seed: int) -> Scene:
    """Generate one deterministic scene.

    Object surfaces are shells on sensor-visible faces; coordinate noise
    is applied to object points and then clamped back into the owning box
    so the foreground-inside-box invariant holds exactly. Background is
    ground-plane points plus a small fraction of uniform clutter.
    """
    rng = substream(seed, "scene")
    sensor = np.asarray(spec.sensor_origin, dtype=np.float64)
    (xlo, xhi), (ylo, yhi) = spec.region
    class_names = sorted(spec.classes)

    warnings: list[str] = []
    boxes: list[np.ndarray] = []
    classes: list[str] = []
    count = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    for _ in range(count):
        placed = False
        for _attempt in range(_PLACEMENT_RETRIES):
            cls = class_names[int(rng.integers(len(class_names)))]
            dist = spec.classes[cls]
            size = np.asarray(dist.mean) + np.asarray(dist.std) * rng.standard_normal(3)
            size = np.maximum(size, 0.25 * np.asarray(dist.mean))
            x = rng.uniform(xlo, xhi)
            y = rng.uniform(ylo, yhi)
            yaw = rng.uniform(-np.pi, np.pi)
            cand = np.array([x, y, size[2] / 2.0, size[0], size[1], size[2], yaw])
            if np.hypot(x - sensor[0], y - sensor[1]) < _MIN_SENSOR_CLEARANCE + np.hypot(size[0], size[1]) / 2.0:
                continue
            if any(bev_iou(cand, b) > 0.0 for b in boxes):
                continue
            boxes.append(cand)
            classes.append(cls)
            placed = True
            break
        if not placed:
            warnings.append(f"object placement failed after {_PLACEMENT_RETRIES} retries; scene has {len(boxes)} objects")
            break

    point_chunks: list[np.ndarray] = []
    label_chunks: list[np.ndarray] = []
    for idx, box in enumerate(boxes):
        pts = _sample_object_shell(box, sensor, spec.surface_density, rng)
        if spec.noise_std > 0 and len(pts):
            pts = pts + rng.normal(0.0, spec.noise_std, size=pts.shape)
            nbv = np.clip(nbv_points(pts, box), -1.0, 1.0)
            pts = nbv_inverse_points(nbv, box)
        if spec.dropout > 0 and len(pts):
            pts = pts[rng.random(len(pts)) >= spec.dropout]
        if len(pts):
            point_chunks.append(pts)
            label_chunks.append(np.full(len(pts), idx, dtype=np.int64))

    area = (xhi - xlo) * (yhi - ylo)
    n_ground = rng.poisson(area * spec.background_density)
    if n_ground:
        ground = np.zeros((n_ground, 3))
        ground[:, 0] = rng.uniform(xlo, xhi, size=n_ground)
        ground[:, 1] = rng.uniform(ylo, yhi, size=n_ground)
        point_chunks.append(ground)
        label_chunks.append(np.full(n_ground, -1, dtype=np.int64))
    n_clutter = rng.poisson(area * spec.background_density * _CLUTTER_FRACTION)
    if n_clutter:
        clutter = np.zeros((n_clutter, 3))
        clutter[:, 0] = rng.uniform(xlo, xhi, size=n_clutter)
        clutter[:, 1] = rng.uniform(ylo, yhi, size=n_clutter)
        clutter[:, 2] = rng.uniform(0.0, _CLUTTER_ZMAX, size=n_clutter)
        point_chunks.append(clutter)
        label_chunks.append(np.full(n_clutter, -1, dtype=np.int64))

    if point_chunks:
        points = np.concatenate(point_chunks, axis=0)
        labels = np.concatenate(label_chunks, axis=0)
    else:
        points = np.zeros((0, 3))
        labels = np.zeros(0, dtype=np.int64)

    gt = np.stack(boxes) if boxes else np.zeros((0, 7))
    return Scene(
        cloud=PointCloud(points=points, labels=labels),
        gt_boxes=gt,
        gt_classes=classes,
        sensor_origin=sensor,
        warnings=warnings,
    )


def _box_noise(box, sigma: float, model: PerturbationModel, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal(7) * model.scales(box) * sigma


def _apply_box_noise(box, noise: np.ndarray) -> np.ndarray:
    b = np.asarray(box, dtype=np.float64)
    out = b + noise
    out[3:6] = np.maximum(out[3:6], _SIZE_CLAMP * b[3:6])
    out[6] = wrap_angle(out[6])
    return out


def perturb_box(box, sigma: float, model: PerturbationModel, seed: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add Gaussian box noise at level `sigma`; extents clamped, yaw wrapped."""
    if sigma < 0:
        raise DataError("sigma must be non-negative")
    if rng is None:
        rng = substream(0 if seed is None else seed, "perturb")
    return _apply_box_noise(box, _box_noise(box, sigma, model, rng))


def _confidence_from_noise(noise: np.ndarray, scales: np.ndarray) -> float:
    normalized = noise / np.maximum(scales, 1e-12)
    rms = float(np.sqrt(np.mean(normalized**2)))
    return float(np.clip(np.exp(-rms), 0.0, 1.0))


def simulate_detections(
    scene: Scene,
    model: PerturbationModel,
    sigma_det: float,
    fp_rate: float,
    fn_rate: float,
    seed: int,
    spec: SceneSpec | None = None,
) -> list[Detection]:
    """Simulate a coarse detector on a scene.

    Every surviving ground-truth box is perturbed at level `sigma_det`;
    its confidence decreases with the realized noise magnitude (RMS of the
    per-parameter noise in units of the model scales), so larger
    perturbations come back less confident. False positives are random
    boxes over the scene region with low confidence; their count is
    Poisson with mean fp_rate times the object count.
    """
    if not (0.0 <= fp_rate < 1.0 and 0.0 <= fn_rate <= 1.0):
        raise DataError("fp_rate must be in [0, 1) and fn_rate in [0, 1]")
    rng = substream(seed, "detections")
    spec = spec if spec is not None else SceneSpec()
    detections: list[Detection] = []
    for idx, box in enumerate(scene.gt_boxes):
        if rng.random() < fn_rate:
            continue
        noise = _box_noise(box, sigma_det, model, rng)
        det_box = _apply_box_noise(box, noise)
        conf = _confidence_from_noise(noise, model.scales(box))
        cls = scene.gt_classes[idx] if idx < len(scene.gt_classes) else "car"
        detections.append(Detection(box=det_box, confidence=conf, cls=cls, source_gt=idx))

    n_fp = rng.poisson(fp_rate * max(len(scene.gt_boxes), 1)) if fp_rate > 0 else 0
    (xlo, xhi), (ylo, yhi) = spec.region
    class_names = sorted(spec.classes)
    for _ in range(n_fp):
        cls = class_names[int(rng.integers(len(class_names)))]
        dist = spec.classes[cls]
        size = np.maximum(np.asarray(dist.mean) + np.asarray(dist.std) * rng.standard_normal(3), 0.25 * np.asarray(dist.mean))
        box = np.array(
            [
                rng.uniform(xlo, xhi),
                rng.uniform(ylo, yhi),
                size[2] / 2.0,
                size[0],
                size[1],
                size[2],
                rng.uniform(-np.pi, np.pi),
            ]
        )
        detections.append(Detection(box=box, confidence=float(rng.uniform(0.02, 0.25)), cls=cls, source_gt=None))
    return detections
