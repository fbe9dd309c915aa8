"""Run configuration: one sectioned key=value file covering every pipeline stage.

Every key has a default; unknown sections or keys are rejected.  The
canonical text produced by :func:`dump_config` parses back to an equal
config, and re-dumping that config yields the identical text.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import MultiTaskLossConfig
from .model import DEFAULT_CHANNELS, NetworkConfig
from .optim import AdamState
from .pipeline import STRATEGIES, MULTI_MANUAL
from .semisup import SemiSupConfig, TrainConfig


@dataclass
class RunSection:
    strategy: str = MULTI_MANUAL
    seed: int = 0
    val_fold: int = 0
    labeled_fraction: float = 1.0


@dataclass
class DataSection:
    n_scans: int = 40
    nodules_per_scan: int = 10
    nonnodules_per_scan: int = 10
    patch_shape: tuple[int, ...] = (8, 32, 32)
    folds: int = 10
    augment: bool = True


@dataclass
class NetworkSection:
    channels_per_stage: tuple[int, ...] = DEFAULT_CHANNELS
    pool_positions: tuple[int, ...] = (2, 4, 6)
    upsample_positions: tuple[int, ...] = (8, 10, 12)
    fc_hidden: int = 1024
    cls_conv_channels: int = 1
    dtype: str = "float64"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    skips: bool = False


@dataclass
class LossSection:
    w_cls: float = 1.0
    w_seg: float = 1.0
    lam: float = 0.0
    clamp_eps: float = 1e-7


@dataclass
class OptimSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 16
    seg_threshold: float = 0.5
    nonnodule_seg_loss: bool = True


@dataclass
class SemiSupSection:
    chunk_fraction: float = 0.25
    rounds: int = 4
    epochs_per_round: int = 10
    confidence_floor: float = 0.0


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)
    semisup: SemiSupSection = field(default_factory=SemiSupSection)

    def validate(self) -> "RunConfig":
        if self.run.strategy not in STRATEGIES:
            raise ConfigError(f"run.strategy must be one of {', '.join(STRATEGIES)}")
        if not 0.0 <= self.run.labeled_fraction <= 1.0:
            raise ConfigError("run.labeled_fraction must lie in [0, 1]")
        if not 0 <= self.run.val_fold < self.data.folds:
            raise ConfigError("run.val_fold must lie in [0, data.folds)")
        if len(self.data.patch_shape) != 3:
            raise ConfigError("data.patch_shape needs three extents")
        # constructing the derived configs runs their own checks
        self.network_config()
        self.loss_config()
        self.train_config()
        self.semisup_config()
        AdamState(lr=self.optim.lr, beta1=self.optim.beta1, beta2=self.optim.beta2, eps=self.optim.eps)
        return self

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(input_shape=tuple(self.data.patch_shape), seed=self.run.seed,
                             **dataclasses.asdict(self.network))

    def loss_config(self) -> MultiTaskLossConfig:
        return MultiTaskLossConfig(**dataclasses.asdict(self.loss))

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.optim.lr, seed=self.run.seed, **dataclasses.asdict(self.train))

    def semisup_config(self) -> SemiSupConfig:
        return SemiSupConfig(epochs_initial=self.train.epochs, seed=self.run.seed,
                             **dataclasses.asdict(self.semisup))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    known = {f.name for f in dataclasses.fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(cfg, section)
        defaults = {f.name: getattr(target, f.name) for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _parse(raw, defaults[key], f"{section}.{key}"))
    return cfg.validate()


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec in dataclasses.fields(cfg):
        section = getattr(cfg, sec.name)
        lines.append(f"[{sec.name}]")
        for f in dataclasses.fields(section):
            lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
