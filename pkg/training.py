"""
Training loop: sample template/search pairs, sum the weighted losses over a
batch (optionally split across worker threads), Adam step, CSV log and
periodic checkpoints that resume bit-identically.
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field

import numpy as np

from data_io import SEARCH_MARGIN, TEMPLATE_MARGIN, EmptyCropError, sample_training_pair
from evaluation import TRAINING_MANIFEST
from losses import LossBreakdown, LossConfig, LossError, compute_losses
from model import ModelConfig, ModelParams, init_params, model_forward
from tensor_core import OptimizerState, TensorError, optimizer_step

logger = logging.getLogger(__name__)

LOG_HEADER = ["step", "L_seg", "L_center", "L_offset", "L_z", "L_total"]
LOG_FILE = "training_log.csv"
CHECKPOINT_DIR = "checkpoint"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    augment: bool = True
    fixed_batch: bool = False
    workers: int = 1
    optimizer: str = "adam"
    search_margin: float = SEARCH_MARGIN
    template_margin: float = TEMPLATE_MARGIN

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise TrainingError("steps >= 0, batch_size >= 1 and lr > 0 are required")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainingError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class PairSpec:
    seq_index: int
    frame_index: int
    seed: int
    fps_start: int


@dataclass
class TrainOutcome:
    params: ModelParams
    log_path: str
    checkpoint_dir: str
    history: list = field(default_factory=list)


def write_training_manifest(out_dir: str, sequences: list, setting: str | None = None) -> str:
    manifest = {"categories": sorted({s.category for s in sequences}),
                "sequence_ids": [s.id for s in sequences], "setting": setting}
    path = os.path.join(out_dir, TRAINING_MANIFEST)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


def _candidates(sequences: list) -> list:
    return [(i, t) for i, seq in enumerate(sequences) for t in range(1, len(seq))]


def _draw_specs(rng: np.random.Generator, candidates: list, count: int, n_search: int) -> list:
    picks = rng.integers(len(candidates), size=count)
    seeds = rng.integers(2 ** 31, size=count)
    starts = rng.integers(n_search, size=count)
    return [PairSpec(*candidates[p], int(s), int(f)) for p, s, f in zip(picks, seeds, starts)]


def _shard_gradients(params: ModelParams, pairs: list, model_config: ModelConfig, loss_config: LossConfig,
                     scale: float) -> tuple:
    """Gradients of scale * sum(pair losses) on a private replica of the parameters."""
    replica = params.clone()
    total, breakdowns = None, []
    for pair, spec in pairs:
        result = model_forward(pair.template, pair.search, replica, model_config, fps_start=spec.fps_start)
        loss, breakdown = compute_losses(result.head, pair.targets, loss_config, model_config.bev_grid)
        total = loss if total is None else total + loss
        breakdowns.append(breakdown)
    (total * scale).backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in replica.items()}
    return grads, breakdowns


class Trainer:
    def __init__(self, model_config: ModelConfig, loss_config: LossConfig, train_config: TrainConfig,
                 sequences: list, out_dir: str):
        if not sequences:
            raise TrainingError("no training sequences")
        self.model_config = model_config
        self.loss_config = loss_config
        self.cfg = train_config
        self.sequences = sequences
        self.out_dir = out_dir
        self.candidates = _candidates(sequences)
        self.params = init_params(model_config, train_config.seed)
        self.state = OptimizerState(kind=train_config.optimizer)
        self.rng = np.random.default_rng(train_config.seed)
        self.step = 0
        self.fixed = None
        if train_config.fixed_batch:
            fixed_rng = np.random.default_rng(train_config.seed + 1)
            self.fixed = self._sample_batch(fixed_rng, augment=False)

    @property
    def log_path(self) -> str:
        return os.path.join(self.out_dir, LOG_FILE)

    def _sample_batch(self, rng: np.random.Generator, augment: bool) -> list:
        batch, attempts = [], 0
        while len(batch) < self.cfg.batch_size and attempts < 10 * self.cfg.batch_size:
            spec = _draw_specs(rng, self.candidates, 1, self.model_config.n_search)[0]
            attempts += 1
            try:
                pair = sample_training_pair(self.sequences[spec.seq_index], spec.frame_index, augment, spec.seed,
                                            self.model_config.n_template, self.model_config.n_search,
                                            self.model_config.bev_grid, self.cfg.search_margin,
                                            self.cfg.template_margin)
            except (EmptyCropError, LossError) as e:
                logger.debug(f"skipping pair: {e}")
                continue
            batch.append((pair, spec))
        if not batch:
            raise TrainingError(f"no usable training pair after {attempts} attempts")
        return batch

    def resume(self, checkpoint_dir: str) -> None:
        params, rest, meta = ModelParams.load(checkpoint_dir, self.model_config)
        self.params = params
        self.state = OptimizerState.from_arrays(rest, kind=meta.get("optimizer", self.cfg.optimizer))
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng_state"]
        logger.info(f"Resumed from {checkpoint_dir} at step {self.step}")

    def save(self, directory: str) -> str:
        meta = {"step": self.step, "rng_state": self.rng.bit_generator.state, "optimizer": self.state.kind,
                "train_config": asdict(self.cfg), "loss_config": asdict(self.loss_config)}
        return self.params.save(directory, self.state.to_arrays(), meta)

    def train_step(self) -> LossBreakdown:
        batch = self.fixed if self.fixed is not None else self._sample_batch(self.rng, self.cfg.augment)
        workers = max(1, min(self.cfg.workers, len(batch)))
        shards = [batch[i::workers] for i in range(workers)]
        scale = 1.0 / len(batch)
        results = [None] * workers
        try:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                futures = {executor.submit(_shard_gradients, self.params, shard, self.model_config,
                                           self.loss_config, scale): i for i, shard in enumerate(shards)}
                for fut in as_completed(futures):
                    results[futures[fut]] = fut.result()
        except LossError as e:
            specs = [(self.sequences[s.seq_index].id, s.frame_index) for _, s in batch]
            raise TrainingError(f"step {self.step + 1}: {e}; batch {specs}") from e

        self.params.zero_grad()
        breakdowns = []
        for grads, shard_breakdowns in results:
            for name, tensor in self.params.items():
                tensor.accumulate_grad(grads[name])
            breakdowns.extend(shard_breakdowns)
        try:
            optimizer_step(self.params.tensors, self.state, self.cfg.lr)
        except TensorError as e:
            raise TrainingError(f"step {self.step + 1}: {e}") from e
        self.step += 1

        rows = np.array([b.as_row() for b in breakdowns]).mean(axis=0)
        return LossBreakdown(*map(float, rows))

    def run(self, resume_from: str | None = None, setting: str | None = None) -> TrainOutcome:
        os.makedirs(self.out_dir, exist_ok=True)
        kept = []
        if resume_from:
            self.resume(resume_from)
            if os.path.exists(self.log_path):
                with open(self.log_path, "r", newline="", encoding="utf-8") as f:
                    kept = [row for row in list(csv.reader(f))[1:] if row and int(float(row[0])) <= self.step]
                logger.info(f"resuming log at step {self.step}, keeping {len(kept)} rows")
        with open(self.log_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(LOG_HEADER)
            writer.writerows(kept)
        write_training_manifest(self.out_dir, self.sequences, setting)

        latest = os.path.join(self.out_dir, CHECKPOINT_DIR)
        history = []
        with open(self.log_path, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            while self.step < self.cfg.steps:
                breakdown = self.train_step()
                history.append(breakdown)
                writer.writerow([self.step, *(repr(v) for v in breakdown.as_row())])
                f.flush()
                if self.step % self.cfg.log_every == 0 or self.step == 1:
                    logger.info(f"step {self.step}/{self.cfg.steps}: total {breakdown.total:.4f} "
                                f"(seg {breakdown.seg:.3f} center {breakdown.center:.3f} "
                                f"offset {breakdown.offset:.3f} z {breakdown.zaxis:.3f})")
                if self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                    self.save(os.path.join(self.out_dir, "checkpoints", f"step_{self.step:06d}"))
        self.save(latest)
        return TrainOutcome(self.params, self.log_path, latest, history)


def train(model_config: ModelConfig, loss_config: LossConfig, train_config: TrainConfig, sequences: list,
          out_dir: str, resume_from: str | None = None, setting: str | None = None) -> TrainOutcome:
    return Trainer(model_config, loss_config, train_config, sequences, out_dir).run(resume_from, setting)


def read_training_log(path: str) -> list:
    with open(path, "r", newline="", encoding="utf-8") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]
