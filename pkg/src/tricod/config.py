"""Run configuration: dataclasses, the flat ``key = value`` file format, and fingerprints.

A config file holds one assignment per line with dotted key paths, e.g.::

    model.backbone = tiny
    model.scale_set = 0.5, 1.0, 1.5
    train.schedule.kind = cosine

Blank lines and ``#`` comments are ignored.  Every field of :class:`Config` is
reachable by its key path and unknown keys are hard errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

DATA_ROOT_ENV = "TRICOD_DATA_ROOT"

BACKBONES = ("resnet50", "tiny")
MERGE_STRATEGIES = ("siu", "addition")
DECODER_UNITS = ("hmu", "cbr_baseline")
UAL_FORMS = ("pow", "exp", "weighted_bce", "none")
SCHEDULE_KINDS = ("cosine", "linear", "constant")
VALID_SCALES = (0.5, 1.0, 1.5)


class ConfigError(ValueError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass
class ModelConfig:
    backbone: str = "resnet50"
    base_channels: int = 64
    hmu_groups: int = 6
    hmu_group_channels: int = 32
    scale_set: tuple[float, ...] = (0.5, 1.0, 1.5)
    merge_strategy: str = "siu"
    decoder_unit: str = "hmu"
    fu_repeat: int = 1
    last_cbr_repeat: int = 1
    decoder_kernel_size: int = 3
    head_mid_channels: int = 32
    scale_specific_norm: bool = True
    pretrained: bool = False
    pretrained_path: str = ""

    def validate(self) -> None:
        _require(self.backbone in BACKBONES, f"model.backbone must be one of {BACKBONES}")
        _require(self.merge_strategy in MERGE_STRATEGIES, f"model.merge_strategy must be one of {MERGE_STRATEGIES}")
        _require(self.decoder_unit in DECODER_UNITS, f"model.decoder_unit must be one of {DECODER_UNITS}")
        _require(self.base_channels > 0, "model.base_channels must be positive")
        _require(self.hmu_groups >= 2, "model.hmu_groups must be >= 2")
        _require(self.hmu_group_channels > 0, "model.hmu_group_channels must be positive")
        _require(len(self.scale_set) > 0, "model.scale_set must be nonempty")
        _require(all(s in VALID_SCALES for s in self.scale_set), f"model.scale_set entries must be in {VALID_SCALES}")
        _require(len(set(self.scale_set)) == len(self.scale_set), "model.scale_set has duplicates")
        _require(1.0 in self.scale_set, "model.scale_set must contain the main scale 1.0")
        _require(self.fu_repeat > 0 and self.last_cbr_repeat > 0, "CBR repeat counts must be positive")
        _require(self.decoder_kernel_size > 0 and self.decoder_kernel_size % 2 == 1,
                 "model.decoder_kernel_size must be odd and positive")
        _require(self.head_mid_channels > 0, "model.head_mid_channels must be positive")

    @property
    def scales(self) -> tuple[float, ...]:
        return tuple(sorted(self.scale_set))


@dataclass
class UalSpec:
    form: str = "pow"
    alpha: float = 2.0

    def validate(self) -> None:
        _require(self.form in UAL_FORMS, f"ual form must be one of {UAL_FORMS}")
        _require(self.alpha > 0, "ual alpha must be > 0")


@dataclass
class ScheduleSpec:
    kind: str = "cosine"
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    t_start: float = 0.0
    t_end: float = 1.0
    constant: float = 1.0

    def validate(self) -> None:
        _require(self.kind in SCHEDULE_KINDS, f"schedule kind must be one of {SCHEDULE_KINDS}")
        _require(self.lambda_min <= self.lambda_max, "lambda_min must not exceed lambda_max")
        _require(self.t_end > self.t_start, "schedule t_end must be greater than t_start")


@dataclass
class TrainConfig:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_fraction: float = 0.05
    epochs: int = 40
    max_iters: int = 0  # 0: epochs * batches per epoch
    batch_size: int = 8
    main_scale: int = 384
    hflip: bool = True
    rotate: bool = True
    flip_prob: float = 0.5
    rotate_prob: float = 0.5
    rotate_degrees: float = 15.0
    seed: int = 0
    num_workers: int = 0
    ual: UalSpec = field(default_factory=UalSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)

    def validate(self) -> None:
        _require(self.base_lr > 0, "train.base_lr must be > 0")
        _require(self.epochs >= 1, "train.epochs must be >= 1")
        _require(self.max_iters >= 0, "train.max_iters must be >= 0")
        _require(self.batch_size >= 1, "train.batch_size must be >= 1")
        _require(self.main_scale > 0 and self.main_scale % 32 == 0, "train.main_scale must be divisible by 32")
        _require(0.0 <= self.warmup_fraction < 1.0, "train.warmup_fraction must be in [0, 1)")
        _require(self.num_workers >= 0, "train.num_workers must be >= 0")
        self.ual.validate()
        self.schedule.validate()


@dataclass
class DataConfig:
    train_roots: tuple[str, ...] = ()
    test_roots: tuple[str, ...] = ()
    infer_root: str = ""


@dataclass
class EvalConfig:
    pred_dir: str = ""
    gt_dir: str = ""
    beta2: float = 0.3
    num_thresholds: int = 256
    sm_alpha: float = 0.5
    histogram_band: bool = False  # count only 8-bit values 20..245
    workers: int = 1


@dataclass
class DiagConfig:
    gradcheck_coords: int = 200
    gradcheck_eps: float = 1e-5
    equivalence_seeds: int = 3
    input_size: int = 0  # 0: train.main_scale


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    checkpoint: str = ""
    dump_debug: bool = False
    device: str = "cpu"


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def validate(self) -> "Config":
        self.model.validate()
        self.train.validate()
        return self

    def fingerprint(self) -> str:
        return config_fingerprint(self.model, self.train)


def config_fingerprint(model: ModelConfig, train: TrainConfig) -> str:
    payload = json.dumps({"model": dataclasses.asdict(model), "train": dataclasses.asdict(train)},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(tp, text: str):
    text = text.strip()
    if tp is bool:
        return _parse_bool(text)
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if typing.get_origin(tp) is tuple:
        (item_tp, _ellipsis) = typing.get_args(tp)
        if not text:
            return ()
        return tuple(_coerce(item_tp, part) for part in text.split(","))
    raise ConfigError(f"unsupported field type {tp!r}")


def set_value(cfg: Config, key: str, value: str) -> None:
    parts = key.strip().split(".")
    obj = cfg
    for i, name in enumerate(parts):
        if not dataclasses.is_dataclass(obj):
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(hints[name]):
                raise ConfigError(f"config key {key!r} names a section, not a field")
            try:
                setattr(obj, name, _coerce(hints[name], value))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        else:
            obj = getattr(obj, name)


def parse_assignment(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"expected key=value, got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def loads(text: str, overrides=()) -> Config:
    cfg = Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            set_value(cfg, *parse_assignment(line))
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    for item in overrides:
        set_value(cfg, *parse_assignment(item))
    return cfg.validate()


def load_config(path, overrides=()) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return loads(path.read_text(), overrides)


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        elif isinstance(value, tuple):
            yield key, ", ".join(str(v) for v in value)
        else:
            yield key, str(value).lower() if isinstance(value, bool) else str(value)


def dumps(cfg: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in _flatten(cfg))


def resolve_data_path(path: str) -> Path:
    """Relative dataset paths are resolved against ``$TRICOD_DATA_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


TINY_MODEL = {"backbone": "tiny", "base_channels": 32, "hmu_group_channels": 16, "head_mid_channels": 16}


def tiny_model_config(**overrides) -> ModelConfig:
    """CPU-sized preset: tiny backbone, 32-channel features, 16-channel groups and head."""
    return ModelConfig(**{**TINY_MODEL, **overrides})
