"""
Configuration: TOML file sections mapped onto the dataclass configs, plus
environment overrides loaded through python-dotenv.
"""

import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields

from dotenv import load_dotenv

from data_io import SynthConfig
from evaluation import EvalConfig
from losses import LossConfig
from model import ModelConfig
from point_ops import BevGrid
from tracker import TrackerConfig
from training import TrainConfig

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "ost_config.toml"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class ConfigError(ValueError):
    pass


@dataclass
class OSTConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    source: str | None = None


SECTIONS = {"model": ModelConfig, "loss": LossConfig, "synth": SynthConfig, "train": TrainConfig,
            "tracker": TrackerConfig, "eval": EvalConfig}


def _build(section: str, cls, values: dict):
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    if section == "model" and "bev_grid" in values:
        grid = values["bev_grid"]
        unknown = sorted(set(grid) - {"x_range", "y_range", "z_range", "pixel_size"})
        if unknown:
            raise ConfigError(f"[model.bev_grid] unknown key(s): {', '.join(unknown)}")
        values = dict(values, bev_grid=BevGrid(**{k: tuple(v) if isinstance(v, list) else v
                                                  for k, v in grid.items()}))
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def parse_config(data: dict, source: str | None = None) -> OSTConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    built = {name: _build(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()}
    return OSTConfig(**built, source=source)


def load_config(path: str | None = None) -> OSTConfig:
    """Read the TOML config; OST_CONFIG or ./ost_config.toml when no path is given, defaults if neither exists."""
    path = path or os.getenv("OST_CONFIG")
    if path is None and os.path.exists(DEFAULT_CONFIG_FILE):
        path = DEFAULT_CONFIG_FILE
    if path is None:
        logger.info("No config file found, using built-in defaults")
        return OSTConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.info(f"Loaded config from {path}")
    return parse_config(data, source=path)


def worker_count() -> int:
    raw = os.getenv("OST_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"OST_THREADS must be an integer, got '{raw}'") from e
    return max(1, value)


def log_level() -> str:
    return os.getenv("OST_LOG_LEVEL", "INFO").upper()
