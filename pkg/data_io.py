"""
Sequences for training and evaluation: a synthetic LiDAR generator, KITTI
tracking ingestion (velodyne scans, labels, calibration) and the
class-agnostic / class-specific splits.
"""

import functools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from geometry import Box3D, box_to_canonical, points_in_box, rigid_transform_points
from losses import BevTargets, make_bev_targets
from point_ops import BevGrid, PointCloud
from tracker import crop_and_sample

logger = logging.getLogger(__name__)

SEQUENCE_MANIFEST = "manifest.json"
TEMPLATE_MARGIN = 0.1
SEARCH_MARGIN = 2.0
JITTER_XY = 0.3
JITTER_YAW = math.radians(5.0)

CATEGORY_SIZES = {
    "Car": (3.9, 1.6, 1.5),
    "Van": (5.0, 2.0, 2.2),
    "Pedestrian": (0.8, 0.6, 1.7),
    "Cyclist": (1.8, 0.6, 1.7),
}

VAL_SCENES = (17, 18)
TEST_SCENES = (19, 20)


class DataFormatError(ValueError):
    pass


class VelodyneFormatError(DataFormatError):
    pass


class KittiParseError(DataFormatError):
    pass


class SynthError(ValueError):
    pass


class SplitError(ValueError):
    pass


class EmptyCropError(ValueError):
    pass


@dataclass
class Frame:
    cloud: PointCloud
    gt: Box3D


@dataclass
class Sequence:
    frames: list
    category: str
    id: str
    scene: int = 0

    def __post_init__(self):
        if len(self.frames) < 2:
            raise DataFormatError(f"sequence {self.id} needs at least 2 frames, got {len(self.frames)}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def boxes(self) -> list:
        return [f.gt for f in self.frames]


# ---------------------------------------------------------------------------
# synthetic sequences
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_frames: int = 20
    size: tuple = CATEGORY_SIZES["Car"]
    density: float = 40.0             # surface points per square meter
    speed: tuple = (0.1, 0.5)         # meters per frame along the heading
    yaw_rate: float = 0.05            # max |yaw change| per frame, radians
    n_distractors: int = 2
    distractor_spacing: float = 1.0   # min gap between bounding circles, meters
    distractor_speed: float = 0.05
    ground_points: int = 100
    dropout: float = 0.1
    scene_margin: float = 6.0
    seed: int = 0
    category: str = "Car"
    scene: int = 0

    def __post_init__(self):
        self.size = tuple(float(s) for s in self.size)
        self.speed = tuple(float(s) for s in self.speed)
        if self.n_frames < 2:
            raise SynthError("a sequence needs at least 2 frames")
        if min(self.size) <= 0 or self.density <= 0:
            raise SynthError("size and density must be positive")
        if self.distractor_spacing <= 0:
            raise SynthError("distractor spacing must be positive")
        if self.n_distractors < 0 or self.ground_points < 0 or not 0 <= self.dropout < 1:
            raise SynthError("counts must be nonnegative and dropout in [0, 1)")
        if not 0 <= self.speed[0] <= self.speed[1]:
            raise SynthError(f"invalid speed bounds {self.speed}")


def sample_box_surface(size, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points on the faces of an origin-centered cuboid, faces chosen by area."""
    l, w, h = size
    half = np.array([l, w, h]) / 2.0
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n_points, p=areas / areas.sum())
    points = rng.uniform(-half, half, size=(n_points, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    points[np.arange(n_points), axis] = sign * half[axis]
    return points


def _trajectory(cfg: SynthConfig, rng: np.random.Generator) -> list:
    yaw = rng.uniform(-np.pi, np.pi)
    center = np.array([0.0, 0.0, cfg.size[2] / 2.0])
    boxes = []
    for _ in range(cfg.n_frames):
        boxes.append(Box3D(center.copy(), cfg.size, yaw))
        step = rng.uniform(cfg.speed[0], cfg.speed[1])
        center = center + step * np.array([math.cos(yaw), math.sin(yaw), 0.0])
        yaw = yaw + rng.uniform(-cfg.yaw_rate, cfg.yaw_rate)
    return boxes


def _bounding_radius(size) -> float:
    return 0.5 * math.hypot(size[0], size[1])


def _place_distractors(cfg: SynthConfig, boxes: list, rng: np.random.Generator) -> tuple:
    """Per distractor, one box per frame; each keeps the spacing from the target in every frame."""
    centers = np.array([b.center for b in boxes])
    low = centers[:, :2].min(axis=0) - cfg.scene_margin
    high = centers[:, :2].max(axis=0) + cfg.scene_margin
    target_radius = _bounding_radius(cfg.size)
    tracks = []
    for k in range(cfg.n_distractors):
        for _ in range(1000):
            size = np.array(cfg.size) * rng.uniform(0.9, 1.1, size=3)
            start = rng.uniform(low, high)
            velocity = rng.uniform(-cfg.distractor_speed, cfg.distractor_speed, size=2)
            yaw = rng.uniform(-np.pi, np.pi)
            path = start + np.arange(cfg.n_frames)[:, None] * velocity
            gaps = np.linalg.norm(path - centers[:, :2], axis=1) - target_radius - _bounding_radius(size)
            if np.all(gaps >= cfg.distractor_spacing):
                tracks.append([Box3D([x, y, size[2] / 2.0], size, yaw) for x, y in path])
                break
        else:
            raise SynthError(f"could not place distractor {k} after 1000 attempts")
    return tracks, low, high


def _surface_cloud(box: Box3D, density: float, dropout: float, rng: np.random.Generator) -> np.ndarray:
    area = 2.0 * (box.size[0] * box.size[1] + box.size[0] * box.size[2] + box.size[1] * box.size[2])
    local = sample_box_surface(box.size, max(1, int(round(density * area))), rng)
    if dropout > 0:
        local = local[rng.random(local.shape[0]) >= dropout]
    return rigid_transform_points(local, box.yaw, box.center)


def synth_sequence(cfg: SynthConfig) -> Sequence:
    """Deterministic under cfg.seed: target shell on a smooth trajectory, distractors, ground noise."""
    rng = np.random.default_rng(cfg.seed)
    boxes = _trajectory(cfg, rng)
    distractors, low, high = _place_distractors(cfg, boxes, rng)
    frames = []
    for t, gt in enumerate(boxes):
        parts = [_surface_cloud(gt, cfg.density, cfg.dropout, rng)]
        parts += [_surface_cloud(track[t], cfg.density, cfg.dropout, rng) for track in distractors]
        if cfg.ground_points:
            ground = np.column_stack([rng.uniform(low, high, size=(cfg.ground_points, 2)),
                                      rng.uniform(-0.3, -0.05, size=cfg.ground_points)])
            parts.append(ground)
        coords = np.vstack(parts)
        frames.append(Frame(PointCloud(coords, np.zeros((coords.shape[0], 1))), gt))
    return Sequence(frames, cfg.category, f"synth-{cfg.category.lower()}-{cfg.seed:04d}", cfg.scene)


def synth_dataset(n_sequences: int, base: SynthConfig | None = None, categories: tuple = ("Car",),
                  n_scenes: int = 21, sizes: dict | None = None) -> list:
    """n_sequences per category; seeds and scenes derived from the base config."""
    base = base or SynthConfig()
    sizes = sizes or CATEGORY_SIZES
    sequences = []
    for c, category in enumerate(categories):
        for i in range(n_sequences):
            values = asdict(base)
            values.update(category=category, size=sizes.get(category, base.size),
                          seed=base.seed + 1000 * c + i, scene=i % n_scenes)
            sequences.append(synth_sequence(SynthConfig(**values)))
    logger.info(f"Generated {len(sequences)} synthetic sequences over {list(categories)}")
    return sequences


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_velodyne_bin(path: str, cloud: PointCloud) -> None:
    intensity = np.zeros(len(cloud))
    if cloud.feats is not None and np.ndim(cloud.feats) == 2 and cloud.feats.shape[1] >= 1:
        intensity = np.asarray(cloud.feats)[:, 0]
    np.column_stack([cloud.coords, intensity]).astype("<f4").tofile(path)


def load_velodyne_bin(path: str) -> PointCloud:
    """Little-endian float32 (x, y, z, intensity) records; intensity becomes a 1-d feature."""
    n_bytes = os.path.getsize(path)
    if n_bytes % 16:
        raise VelodyneFormatError(f"{path}: {n_bytes} bytes is not a whole number of 16-byte points")
    raw = np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(raw[:, :3], raw[:, 3:4])


@functools.lru_cache(maxsize=256)
def _cached_velodyne(path: str) -> PointCloud:
    return load_velodyne_bin(path)


def save_sequence(seq: Sequence, directory: str, cfg: SynthConfig | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    frames = []
    for t, frame in enumerate(seq.frames):
        name = f"{t:06d}.bin"
        write_velodyne_bin(os.path.join(directory, name), frame.cloud)
        frames.append({"file": name, "box": frame.gt.to_array()})
    manifest = {"id": seq.id, "category": seq.category, "scene": seq.scene, "frames": frames,
                "config": asdict(cfg) if cfg is not None else None,
                "seed": cfg.seed if cfg is not None else None}
    with open(os.path.join(directory, SEQUENCE_MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return directory


def load_sequence_dir(directory: str) -> Sequence:
    manifest_path = os.path.join(directory, SEQUENCE_MANIFEST)
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"cannot read sequence manifest {manifest_path}: {e}") from e
    frames = [Frame(load_velodyne_bin(os.path.join(directory, entry["file"])), Box3D.from_array(entry["box"]))
              for entry in manifest["frames"]]
    return Sequence(frames, manifest["category"], manifest["id"], int(manifest.get("scene", 0)))


# ---------------------------------------------------------------------------
# KITTI tracking format
# ---------------------------------------------------------------------------

@dataclass
class Calibration:
    r_rect: np.ndarray        # 3x3
    velo_to_cam: np.ndarray   # 3x4

    def _velo_rotation(self) -> np.ndarray:
        return self.r_rect @ self.velo_to_cam[:, :3]

    def velo_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return (points @ self.velo_to_cam[:, :3].T + self.velo_to_cam[:, 3]) @ self.r_rect.T

    def camera_to_velo(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        reference = np.linalg.solve(self.r_rect, points.T).T
        return np.linalg.solve(self.velo_to_cam[:, :3], (reference - self.velo_to_cam[:, 3]).T).T

    def direction_to_velo(self, vector: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self._velo_rotation(), np.asarray(vector, dtype=np.float64))

    def direction_to_camera(self, vector: np.ndarray) -> np.ndarray:
        return self._velo_rotation() @ np.asarray(vector, dtype=np.float64)


def parse_calibration(path: str) -> Calibration:
    if not os.path.exists(path):
        raise KittiParseError(f"missing calibration file {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.replace(":", " ", 1).partition(" ")
            try:
                values[key] = np.array([float(v) for v in rest.split()])
            except ValueError as e:
                raise KittiParseError(f"{path}: bad calibration entry '{key}'") from e
    r_rect = values.get("R_rect", values.get("R0_rect"))
    velo = values.get("Tr_velo_cam", values.get("Tr_velo_to_cam"))
    if r_rect is None or velo is None:
        raise KittiParseError(f"{path}: needs R_rect/R0_rect and Tr_velo_cam/Tr_velo_to_cam")
    return Calibration(r_rect.reshape(3, 3), velo.reshape(3, 4))


def camera_box_to_velo(location, dims_hwl, rotation_y: float, calib: Calibration) -> Box3D:
    """KITTI camera box (bottom-center location, h w l, rotation_y) to a LiDAR-frame Box3D."""
    h, w, l = dims_hwl
    bottom = calib.camera_to_velo(np.asarray(location, dtype=np.float64))[0]
    heading = calib.direction_to_velo(np.array([math.cos(rotation_y), 0.0, -math.sin(rotation_y)]))
    return Box3D(bottom + np.array([0.0, 0.0, h / 2.0]), (l, w, h), math.atan2(heading[1], heading[0]))


def box_to_camera(box: Box3D, calib: Calibration) -> tuple:
    """Inverse of camera_box_to_velo: (location, (h, w, l), rotation_y)."""
    l, w, h = box.size
    location = calib.velo_to_camera(box.center - np.array([0.0, 0.0, h / 2.0]))[0]
    heading = calib.direction_to_camera(np.array([math.cos(box.yaw), math.sin(box.yaw), 0.0]))
    return location, (h, w, l), math.atan2(-heading[2], heading[0])


@dataclass
class LabelRecord:
    frame: int
    track: int
    category: str
    dims_hwl: tuple
    location: tuple
    rotation_y: float


def parse_label_file(path: str) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 17:
                raise KittiParseError(f"{path}:{lineno}: expected 17 fields, got {len(parts)}")
            try:
                numbers = [float(v) for v in parts[10:17]]
                records.append(LabelRecord(int(parts[0]), int(parts[1]), parts[2],
                                           tuple(numbers[0:3]), tuple(numbers[3:6]), numbers[6]))
            except ValueError as e:
                raise KittiParseError(f"{path}:{lineno}: non-numeric field ({e})") from e
    return records


def load_kitti_tracklets(label_dir: str, calib_dir: str, velodyne_dir: str | None = None) -> list:
    """One Sequence per (scene, track id); DontCare rows and single-frame tracks are skipped."""
    sequences = []
    for name in sorted(os.listdir(label_dir)):
        if not name.endswith(".txt"):
            continue
        stem = os.path.splitext(name)[0]
        scene = int(stem)
        calib = parse_calibration(os.path.join(calib_dir, name))
        tracks = {}
        for record in parse_label_file(os.path.join(label_dir, name)):
            if record.category == "DontCare":
                continue
            tracks.setdefault(record.track, []).append(record)
        for track_id, records in sorted(tracks.items()):
            records.sort(key=lambda r: r.frame)
            if len(records) < 2:
                logger.debug(f"skipping single-frame track {scene}:{track_id}")
                continue
            frames = []
            for r in records:
                cloud = PointCloud(np.zeros((0, 3)), np.zeros((0, 1)))
                if velodyne_dir is not None:
                    path = os.path.join(velodyne_dir, stem, f"{r.frame:06d}.bin")
                    if os.path.exists(path):
                        cloud = _cached_velodyne(path)
                frames.append(Frame(cloud, camera_box_to_velo(r.location, r.dims_hwl, r.rotation_y, calib)))
            sequences.append(Sequence(frames, records[0].category, f"{scene:04d}-{track_id:04d}", scene))
    logger.info(f"Loaded {len(sequences)} KITTI tracklets from {label_dir}")
    return sequences


def load_dataset(directory: str) -> list:
    """A synthetic sequence dir, a dir of them, or a KITTI tracking root (label_02/, calib/, velodyne/)."""
    if os.path.exists(os.path.join(directory, SEQUENCE_MANIFEST)):
        return [load_sequence_dir(directory)]
    label_dir = os.path.join(directory, "label_02")
    if os.path.isdir(label_dir):
        velodyne = os.path.join(directory, "velodyne")
        return load_kitti_tracklets(label_dir, os.path.join(directory, "calib"),
                                    velodyne if os.path.isdir(velodyne) else None)
    if not os.path.isdir(directory):
        raise DataFormatError(f"no dataset at {directory}")
    sequences = [load_sequence_dir(os.path.join(directory, name)) for name in sorted(os.listdir(directory))
                 if os.path.exists(os.path.join(directory, name, SEQUENCE_MANIFEST))]
    if not sequences:
        raise DataFormatError(f"{directory} holds no sequences")
    return sequences


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSetting:
    name: str
    train: frozenset
    observed: frozenset
    unseen: frozenset

    def __post_init__(self):
        if self.train & self.unseen:
            raise SplitError(f"{self.name}: train and unseen categories overlap")
        if not self.observed <= self.train:
            raise SplitError(f"{self.name}: observed categories must be trained on")


SETTINGS = {
    "setting-1": SplitSetting("setting-1", frozenset({"Pedestrian", "Van", "Cyclist"}),
                              frozenset({"Pedestrian", "Van", "Cyclist"}), frozenset({"Car"})),
    "setting-2": SplitSetting("setting-2", frozenset({"Car", "Van", "Cyclist"}),
                              frozenset({"Car", "Van", "Cyclist"}), frozenset({"Pedestrian"})),
}


def resolve_setting(name) -> SplitSetting:
    if isinstance(name, SplitSetting):
        return name
    key = str(name)
    key = f"setting-{key}" if key in ("1", "2") else key
    if key not in SETTINGS:
        raise SplitError(f"unknown setting '{name}' (expected one of {sorted(SETTINGS)})")
    return SETTINGS[key]


@dataclass
class SplitResult:
    train: list = field(default_factory=list)
    observed_test: list = field(default_factory=list)
    unseen_test: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.observed_test, self.unseen_test))

    def counts(self) -> dict:
        return {f.name: len(getattr(self, f.name)) for f in fields(self)}


def dataset_splits(setting, sequences: list, test_scenes=TEST_SCENES, val_scenes=VAL_SCENES) -> SplitResult:
    """Unseen categories go to unseen_test whatever their scene; train categories split by scene.

    Sequences of categories outside the setting land in `excluded`.
    """
    setting = resolve_setting(setting)
    result = SplitResult()
    for seq in sequences:
        if seq.category in setting.unseen:
            result.unseen_test.append(seq)
        elif seq.category in setting.train:
            if seq.scene in test_scenes:
                (result.observed_test if seq.category in setting.observed else result.excluded).append(seq)
            elif seq.scene in val_scenes:
                result.validation.append(seq)
            else:
                result.train.append(seq)
        else:
            result.excluded.append(seq)
    if result.excluded:
        logger.info(f"{setting.name}: {len(result.excluded)} sequences outside the setting's categories")
    return result


def class_specific_split(sequences: list, category: str, test_scenes=TEST_SCENES,
                         val_scenes=VAL_SCENES) -> SplitResult:
    result = SplitResult()
    for seq in sequences:
        if seq.category != category:
            result.excluded.append(seq)
        elif seq.scene in test_scenes:
            result.observed_test.append(seq)
        elif seq.scene in val_scenes:
            result.validation.append(seq)
        else:
            result.train.append(seq)
    return result


# ---------------------------------------------------------------------------
# training pairs
# ---------------------------------------------------------------------------

@dataclass
class TrainingPair:
    template: PointCloud
    search: PointCloud
    targets: BevTargets
    search_ref: Box3D


def sample_training_pair(seq: Sequence, frame_idx: int, aug: bool, seed: int, n_template: int, n_search: int,
                         grid: BevGrid | None = None, search_margin: float = SEARCH_MARGIN,
                         template_margin: float = TEMPLATE_MARGIN) -> TrainingPair:
    """Previous-frame template crop plus a jittered, canonicalized search crop of frame_idx."""
    if not 1 <= frame_idx < len(seq):
        raise DataFormatError(f"frame index {frame_idx} outside 1..{len(seq) - 1}")
    grid = grid or BevGrid()
    rng = np.random.default_rng(seed)
    previous, current = seq.frames[frame_idx - 1], seq.frames[frame_idx]

    template, empty_t = crop_and_sample(previous.cloud, previous.gt.enlarged(template_margin), n_template, rng)
    if aug:
        dx, dy = rng.uniform(-JITTER_XY, JITTER_XY, size=2)
        dyaw = rng.uniform(-JITTER_YAW, JITTER_YAW)
    else:
        dx = dy = dyaw = 0.0
    ref = Box3D(current.gt.center + np.array([dx, dy, 0.0]), current.gt.size, current.gt.yaw + dyaw)
    search, empty_s = crop_and_sample(current.cloud, ref.enlarged(search_margin, grid.z_range), n_search, rng,
                                      frame=ref)
    if empty_t or empty_s:
        raise EmptyCropError(f"{seq.id} frame {frame_idx}: empty {'template' if empty_t else 'search'} crop")
    targets = make_bev_targets(box_to_canonical(current.gt, ref), grid, search)
    return TrainingPair(template, search, targets, ref)
