"""
Success / Precision metrics, the class-agnostic evaluation driver and
parameter / FLOP / latency accounting.
"""

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from data_io import dataset_splits, resolve_setting
from geometry import box_iou_3d, box_iou_bev, center_distance
from model import ModelConfig, ModelParams, init_params, model_forward, parameter_shapes, random_clouds
from tensor_core import no_grad
from tracker import TrackerConfig, track_sequences

logger = logging.getLogger(__name__)

TRAINING_MANIFEST = "training_manifest.json"


class MetricError(ValueError):
    pass


class LeakageError(RuntimeError):
    pass


@dataclass
class EvalConfig:
    iou_mode: str = "3d"           # 3d | bev
    n_thresholds: int = 101
    max_distance: float = 2.0

    def __post_init__(self):
        if self.iou_mode not in ("3d", "bev"):
            raise MetricError(f"unknown iou_mode '{self.iou_mode}'")
        if self.n_thresholds < 2 or self.max_distance <= 0:
            raise MetricError("need at least 2 thresholds and a positive distance range")


@dataclass
class MetricReport:
    success: float
    precision: float
    frames: int
    success_curve: list = field(default_factory=list)
    precision_curve: list = field(default_factory=list)
    per_sequence: dict = field(default_factory=dict)
    per_category: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def success_precision(ious: np.ndarray, distances: np.ndarray, cfg: EvalConfig) -> tuple:
    """(success %, precision %, success curve, precision curve) over uniform thresholds."""
    iou_thresholds = np.linspace(0.0, 1.0, cfg.n_thresholds)
    dist_thresholds = np.linspace(0.0, cfg.max_distance, cfg.n_thresholds)
    overlapping = ious > 0
    success_curve = np.mean((ious[None, :] >= iou_thresholds[:, None]) & overlapping[None, :], axis=1)
    precision_curve = np.mean(distances[None, :] <= dist_thresholds[:, None], axis=1)
    return 100.0 * success_curve.mean(), 100.0 * precision_curve.mean(), success_curve, precision_curve


def _frame_errors(pred, seq, iou_fn) -> tuple:
    if len(pred.boxes) != len(seq.frames):
        raise MetricError(f"{seq.id}: {len(pred.boxes)} predictions for {len(seq.frames)} frames")
    ious = [iou_fn(p, f.gt) for p, f in zip(pred.boxes[1:], seq.frames[1:])]
    dists = [center_distance(p, f.gt) for p, f in zip(pred.boxes[1:], seq.frames[1:])]
    return np.array(ious), np.array(dists)


def evaluate(preds: list, gts: list, cfg: EvalConfig | None = None) -> MetricReport:
    """Pool every frame after the first across sequences; also report per sequence and per category."""
    cfg = cfg or EvalConfig()
    iou_fn = box_iou_3d if cfg.iou_mode == "3d" else box_iou_bev
    by_id = {p.seq_id: p for p in preds}
    if len(by_id) != len(preds) or set(by_id) != {s.id for s in gts}:
        raise MetricError("predictions and ground truth cover different sequences")

    pooled_iou, pooled_dist, per_sequence, by_category = [], [], {}, {}
    for seq in gts:
        ious, dists = _frame_errors(by_id[seq.id], seq, iou_fn)
        s, p, _, _ = success_precision(ious, dists, cfg)
        per_sequence[seq.id] = {"success": s, "precision": p, "frames": int(ious.size), "category": seq.category}
        pooled_iou.append(ious)
        pooled_dist.append(dists)
        bucket = by_category.setdefault(seq.category, ([], []))
        bucket[0].append(ious)
        bucket[1].append(dists)

    ious, dists = np.concatenate(pooled_iou), np.concatenate(pooled_dist)
    if ious.size == 0:
        raise MetricError("no frames to evaluate")
    success, precision, s_curve, p_curve = success_precision(ious, dists, cfg)
    per_category = {}
    for category, (c_ious, c_dists) in sorted(by_category.items()):
        c_ious, c_dists = np.concatenate(c_ious), np.concatenate(c_dists)
        cs, cp, _, _ = success_precision(c_ious, c_dists, cfg)
        per_category[category] = {"success": cs, "precision": cp, "frames": int(c_ious.size)}
    return MetricReport(float(success), float(precision), int(ious.size), s_curve.tolist(), p_curve.tolist(),
                        per_sequence, per_category)


# ---------------------------------------------------------------------------
# class-agnostic protocol
# ---------------------------------------------------------------------------

@dataclass
class ClassAgnosticReport:
    setting: str
    observed: MetricReport | None
    unseen: MetricReport | None

    def to_dict(self) -> dict:
        return {"setting": self.setting,
                "observed": self.observed.to_dict() if self.observed else None,
                "unseen": self.unseen.to_dict() if self.unseen else None}


def read_training_manifest(source) -> dict:
    if isinstance(source, dict):
        return source
    path = os.path.join(source, TRAINING_MANIFEST) if os.path.isdir(source) else source
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def check_leakage(setting, manifest: dict, test_sequences: list) -> None:
    setting = resolve_setting(setting)
    leaked = set(manifest.get("categories", [])) & setting.unseen
    if leaked:
        raise LeakageError(f"{setting.name}: unseen categories {sorted(leaked)} appear in the training manifest")
    overlap = set(manifest.get("sequence_ids", [])) & {s.id for s in test_sequences}
    if overlap:
        raise LeakageError(f"{len(overlap)} test sequences were used for training, e.g. {sorted(overlap)[0]}")


def run_class_agnostic(setting, params: ModelParams, sequences: list, training_manifest,
                       tracker_cfg: TrackerConfig | None = None, eval_cfg: EvalConfig | None = None,
                       workers: int = 1) -> ClassAgnosticReport:
    """Track and score the observed-test and unseen-test pools of a setting separately."""
    setting = resolve_setting(setting)
    split = dataset_splits(setting.name, sequences)
    check_leakage(setting, read_training_manifest(training_manifest), split.observed_test + split.unseen_test)
    tracker_cfg = tracker_cfg or TrackerConfig()

    reports = {}
    for pool, seqs in (("observed", split.observed_test), ("unseen", split.unseen_test)):
        if not seqs:
            logger.warning(f"{setting.name}: {pool} pool is empty")
            reports[pool] = None
            continue
        preds = track_sequences(params, seqs, tracker_cfg, params.config, workers)
        reports[pool] = evaluate(preds, seqs, eval_cfg)
        logger.info(f"{setting.name} {pool}: success {reports[pool].success:.1f} "
                    f"precision {reports[pool].precision:.1f} over {reports[pool].frames} frames")
    return ClassAgnosticReport(setting.name, reports["observed"], reports["unseen"])


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    params: int
    flops: int
    ms: float
    fps: float
    flops_by_component: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def analytic_param_count(config: ModelConfig) -> int:
    """Closed-form parameter total, component by component."""
    d, m, c = config.feat_dim, config.ffn_mult, config.head_channels
    total = 0
    for l in range(config.gcn_layers):
        d_in = (0 if l == 0 else d) + 3
        total += d_in * d + d + d * d + d
    per_layer = (3 * d + d) + (d * d + d) + (4 * d * d + 3 * d) + 4 * d + (d * m * d + m * d) + (m * d * d + d)
    total += config.ttm_layers * per_layer
    if config.use_mfa:
        total += (config.ttm_layers - 1) * (2 * d * d + d)
    if config.use_segmentation:
        total += (d * d + d) + (d + 1)
    total += (config.augmented_dim * 9 * c + c) + 2 * (c * 9 * c + c)
    total += (c + 1) + (3 * c + 3) + (c + 1)
    return total


def _conv_flops(c_in: int, c_out: int, k: int, h: int, w: int) -> int:
    return 2 * c_in * k * k * c_out * h * w


def flop_breakdown(config: ModelConfig) -> dict:
    """Multiply-add counts (2 per MAC) of the dense layers, attention and convolutions."""
    d, m = config.feat_dim, config.ffn_mult
    n_t, n_s, k = config.n_template, config.n_search, config.gcn_neighbors
    n = n_t + n_s
    gcn = 0
    for l in range(config.gcn_layers):
        d_in = (0 if l == 0 else d) + 3
        gcn += 2 * n * k * d_in * d + 2 * n * d * d
    per_layer = (2 * n * 3 * d + 2 * n * d * d      # position embedding
                 + 3 * 2 * n * d * d                  # Q, K, V
                 + 2 * n * n * d                      # Q K^T over all heads
                 + 2 * n * n * d                      # attention @ V
                 + 2 * n * d * d                      # output projection
                 + 2 * 2 * n * d * m * d)             # feed-forward
    ttm = config.ttm_layers * per_layer
    mfa = 0
    if config.use_mfa and config.ttm_layers > 1:
        counts = list(config.mfa_samples) + [n_s]
        for dst in counts[1:]:
            mfa += 2 * 3 * dst * d + 2 * dst * 2 * d * d
        if config.mfa_direction == "usual":
            mfa += 2 * 3 * n_s * d
    seg = 2 * n_s * d * d + 2 * n_s * d if config.use_segmentation else 0
    grid, c = config.bev_grid, config.head_channels
    head = _conv_flops(config.augmented_dim, c, 3, grid.ny, grid.nx) + 2 * _conv_flops(c, c, 3, grid.ny, grid.nx)
    head += _conv_flops(c, 1 + 3 + 1, 1, grid.ny, grid.nx)
    return {"gcn": gcn, "ttm": ttm, "mfa": mfa, "seg": seg, "head": head}


def measure_latency(config: ModelConfig, params: ModelParams | None = None, runs: int = 100, warmup: int = 3,
                    seed: int = 0) -> float:
    """Mean wall-clock ms per forward on random clouds, after warmup runs."""
    params = params or init_params(config, seed)
    template, search = random_clouds(config, np.random.default_rng(seed))
    with no_grad():
        for _ in range(warmup):
            model_forward(template, search, params, config)
        start = time.perf_counter()
        for _ in range(runs):
            model_forward(template, search, params, config)
    return (time.perf_counter() - start) * 1000.0 / max(runs, 1)


def count_params_flops(config: ModelConfig, runs: int = 100, params: ModelParams | None = None,
                       measure: bool = True) -> CostReport:
    n_params = analytic_param_count(config)
    shaped = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    if n_params != shaped:
        raise MetricError(f"closed-form parameter count {n_params} disagrees with the layer table {shaped}")
    breakdown = flop_breakdown(config)
    ms = measure_latency(config, params, runs) if measure else float("nan")
    fps = 1000.0 / ms if measure and ms > 0 else float("nan")
    return CostReport(n_params, int(sum(breakdown.values())), ms, fps, breakdown)
