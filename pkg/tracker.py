"""
One-pass tracking: crop the search region around the previous prediction,
run the network, decode the heatmap peak back into a LiDAR-frame box.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from geometry import Box3D, box_from_canonical, points_in_box, to_canonical_points
from model import HeadOutputs, ModelConfig, ModelParams, model_forward
from point_ops import BevGrid, PointCloud
from tensor_core import no_grad

logger = logging.getLogger(__name__)


class TrackerError(ValueError):
    pass


@dataclass
class TrackerConfig:
    search_margin: float = 2.0
    template_margin: float = 0.1
    template_mode: str = "first"      # first | previous
    template_source: str = "gt"       # gt | noise (ablation control)
    seed: int = 0
    fps_start: int = 0

    def __post_init__(self):
        if self.template_mode not in ("first", "previous"):
            raise TrackerError(f"unknown template_mode '{self.template_mode}'")
        if self.template_source not in ("gt", "noise"):
            raise TrackerError(f"unknown template_source '{self.template_source}'")
        if self.search_margin < 0 or self.template_margin < 0:
            raise TrackerError("margins must be nonnegative")


@dataclass
class TrackResult:
    seq_id: str
    boxes: list = field(default_factory=list)
    ms: list = field(default_factory=list)

    def to_records(self) -> list:
        return [{"seq": self.seq_id, "frame": t, "box": box.to_array(), "ms": float(ms)}
                for t, (box, ms) in enumerate(zip(self.boxes, self.ms))]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def crop_and_sample(cloud: PointCloud, region: Box3D, n_points: int, seed, frame: Box3D | None = None) -> tuple:
    """Points inside `region`, resampled to n_points and expressed in the canonical frame of
    `frame` (default: the region itself). Returns (cloud, degenerate).

    Too many points: subsample without replacement. Too few: keep each once
    and fill with replacement. None: n copies of the origin, flagged degenerate.
    """
    if n_points <= 0:
        raise TrackerError("n_points must be positive")
    rng = _rng(seed)
    inside = np.flatnonzero(points_in_box(cloud.coords, region))
    if inside.size == 0:
        return PointCloud(np.zeros((n_points, 3))), True
    if inside.size >= n_points:
        chosen = rng.choice(inside, size=n_points, replace=False)
    else:
        extra = rng.choice(inside, size=n_points - inside.size, replace=True)
        chosen = rng.permutation(np.concatenate([inside, extra]))
    return PointCloud(to_canonical_points(cloud.coords[chosen], frame or region)), False


def decode_box(out: HeadOutputs, grid: BevGrid, ref: Box3D, template_size, occupancy: np.ndarray | None = None) -> Box3D:
    """Box at the heatmap peak over occupied pixels; `ref` unchanged when nothing is occupied."""
    occupancy = out.occupancy if occupancy is None else occupancy
    if occupancy is None or not np.any(occupancy):
        return ref.copy()
    heat = np.where(occupancy, out.heatmap.data, -np.inf)
    row, col = divmod(int(np.argmax(heat)), grid.nx)
    px, py = grid.pixel_center(row, col)
    dx, dy, yaw = out.offset_rot.data[:, row, col]
    canonical = Box3D([float(px) + dx, float(py) + dy, out.zmap.data[row, col]], template_size, yaw)
    return box_from_canonical(canonical, ref)


def _noise_template(size, n_points: int, rng: np.random.Generator) -> PointCloud:
    half = np.asarray(size, dtype=np.float64) / 2.0
    return PointCloud(rng.uniform(-half, half, size=(n_points, 3)))


def track_sequence(params: ModelParams, seq, cfg: TrackerConfig, model_config: ModelConfig | None = None) -> TrackResult:
    """Track from the frame-0 box; each search region is centered on the previous prediction."""
    model_config = model_config or params.config
    grid = model_config.bev_grid
    rng = np.random.default_rng(cfg.seed)
    first = seq.frames[0].gt
    if cfg.template_source == "noise":
        template = _noise_template(first.size, model_config.n_template, rng)
    else:
        template, _ = crop_and_sample(seq.frames[0].cloud, first.enlarged(cfg.template_margin),
                                      model_config.n_template, rng)

    result = TrackResult(seq.id, [first.copy()], [0.0])
    previous = first
    for t in range(1, len(seq.frames)):
        start = time.perf_counter()
        ref = previous.copy()
        region = ref.enlarged(cfg.search_margin, grid.z_range)
        search, degenerate = crop_and_sample(seq.frames[t].cloud, region, model_config.n_search, rng, frame=ref)
        if degenerate:
            prediction = previous.copy()
        else:
            with no_grad():
                forward = model_forward(template, search, params, model_config, fps_start=cfg.fps_start)
            prediction = decode_box(forward.head, grid, ref, first.size)
        if cfg.template_mode == "previous" and cfg.template_source == "gt":
            updated, empty = crop_and_sample(seq.frames[t].cloud, prediction.enlarged(cfg.template_margin),
                                             model_config.n_template, rng)
            if not empty:
                template = updated
        result.boxes.append(prediction)
        result.ms.append((time.perf_counter() - start) * 1000.0)
        previous = prediction
    return result


def track_sequences(params: ModelParams, sequences: list, cfg: TrackerConfig,
                    model_config: ModelConfig | None = None, workers: int = 1) -> list:
    """Track independent sequences on a thread pool; results keep the input order."""
    results = [None] * len(sequences)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        futures = {executor.submit(track_sequence, params, seq, cfg, model_config): i
                   for i, seq in enumerate(sequences)}
        for fut in as_completed(futures):
            i = futures[fut]
            results[i] = fut.result()
            logger.info(f"Tracked {sequences[i].id} ({len(sequences[i])} frames)")
    return results


def write_track_results(results: list, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        for result in results:
            for record in result.to_records():
                f.write(json.dumps(record) + "\n")
    return path


def read_track_results(path: str) -> list:
    grouped = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                box = Box3D.from_array(record["box"])
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise TrackerError(f"{path}:{lineno}: bad prediction record ({e})") from e
            result = grouped.setdefault(record["seq"], TrackResult(record["seq"]))
            if record["frame"] != len(result.boxes):
                raise TrackerError(f"{path}:{lineno}: frame {record['frame']} out of order for {record['seq']}")
            result.boxes.append(box)
            result.ms.append(float(record.get("ms", 0.0)))
    return list(grouped.values())
