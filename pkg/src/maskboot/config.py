"""Run configuration: every tunable constant, grouped by subsystem.

Configs load from a JSON document whose top-level keys are the group names
below. Unknown keys (at either level) are errors, as are constraint
violations; both name the offending key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

FORMAT_VERSION = 1


@dataclass
class SceneGenConfig:
    image_size: int = 64
    scene_count: int = 2048
    min_objects: int = 2
    max_objects: int = 8
    num_classes: int = 13  # background + 12 shape/color classes
    noise_sigma: float = 0.05


@dataclass
class AugmentConfig:
    out_size: int | None = None  # None -> same as input
    crop_scale_min: float = 0.3
    crop_scale_max: float = 1.0
    crop_ratio_min: float = 0.75
    crop_ratio_max: float = 4.0 / 3.0
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    grayscale_p: float = 0.2
    blur_p_first: float = 1.0   # pipeline T
    blur_p_second: float = 0.1  # pipeline T'
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0


@dataclass
class EncoderConfig:
    channels: tuple[int, int, int, int] = (32, 32, 64, 128)  # stem, s2, s3, s4
    blocks: tuple[int, int, int] = (3, 2, 2)  # per residual stage
    fusion_layers: tuple[str, ...] = ("s2", "s3", "s4")
    fusion_hw: int = 4
    proj_hidden: int = 256
    embed_dim: int = 64
    ema_momentum: float = 0.99
    ema_schedule: str = "constant"  # or "cosine"
    dtype: str = "float32"


@dataclass
class ContrastConfig:
    temperature: float = 0.2
    n_neg: int = 16


@dataclass
class BootstrapConfig:
    k_min: int = 2
    k_max: int = 32
    stage: str = "s2.b2"
    kmeans_iters: int = 50
    cluster_batch: int = 16
    minibatch: bool = False
    minibatch_size: int = 1024


@dataclass
class ConsistencyConfig:
    kappa: float = 10.0
    lambda_vmf: float = 0.1
    warmup_k: int | None = None  # None -> median object count from the manifest
    stage: str = "s2.b2"
    literal_independent_views: bool = False  # sample geometry independently per view


@dataclass
class TrainerConfig:
    epochs: int = 100
    warmup_epochs: int = 5     # W
    bootstrap_period: int | None = 20  # N; None disables periodic re-bootstrapping
    consistency_period: int = 5  # M
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    shuffle: bool = True
    checkpoint_period: int = 20
    checkpoint_epochs: tuple[int, ...] = ()
    mask_mode: str = "bootstrap"  # or random_crop | grid | ground_truth


@dataclass
class ProbeConfig:
    stage: str = "s2.b2"
    steps: int = 300
    lr: float = 0.01
    batch_size: int = 16
    holdout_fraction: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    format_version: int = FORMAT_VERSION
    scenegen: SceneGenConfig = field(default_factory=SceneGenConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    bootstrap: BootstrapConfig = field(default_factory=BootstrapConfig)
    consistency: ConsistencyConfig = field(default_factory=ConsistencyConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)


_GROUPS = {
    "scenegen": SceneGenConfig,
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "contrast": ContrastConfig,
    "bootstrap": BootstrapConfig,
    "consistency": ConsistencyConfig,
    "trainer": TrainerConfig,
    "probe": ProbeConfig,
}

_SCALARS = {"seed": int, "out_dir": str, "format_version": int}


def _coerce(cls: type, key: str, value: Any, where: str) -> Any:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown config key: {where}.{key}")
    ftype = str(fields[key].type)
    if value is None:
        if "None" not in ftype:
            raise ConfigError(f"config key {where}.{key} may not be null")
        return None
    if ftype.startswith("tuple"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {where}.{key} expects a list")
        return tuple(value)
    if ftype.startswith("bool"):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"config key {where}.{key} expects a boolean")
    if ftype.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, (int, str)):
            raise ConfigError(f"config key {where}.{key} expects an integer")
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"config key {where}.{key} expects an integer: {exc}") from exc
    if ftype.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"config key {where}.{key} expects a number")
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"config key {where}.{key} expects a number: {exc}") from exc
    if ftype.startswith("str"):
        return str(value)
    return value


def _build_group(cls: type, data: dict, where: str) -> Any:
    kwargs = {k: _coerce(cls, k, v, where) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a plain dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SCALARS:
            try:
                kwargs[key] = _SCALARS[key](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config key {key} has wrong type: {exc}") from exc
        elif key in _GROUPS:
            if not isinstance(value, dict):
                raise ConfigError(f"config group {key} must be an object")
            kwargs[key] = _build_group(_GROUPS[key], value, key)
        else:
            raise ConfigError(f"unknown config key: {key}")
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``group.key=value`` strings on top of a config dict."""
    out = json.loads(json.dumps(data))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like group.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings are fine
        parts = path.split(".")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})
            if not isinstance(out[parts[0]], dict):
                raise ConfigError(f"cannot override scalar {parts[0]} with nested key")
            out[parts[0]][parts[1]] = value
        else:
            raise ConfigError(f"override path too deep: {path}")
    return out


def parse_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load config file (may be absent -> all defaults), apply flag overrides."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from exc
        try:
            data = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if overrides:
        data = apply_overrides(data, overrides)
    return config_from_dict(data)


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write the fully resolved config into the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=False) + "\n")
    return path


def validate_config(cfg: RunConfig) -> None:
    """Check cross-field constraints; raise ConfigError naming the keys."""
    sg = cfg.scenegen
    if sg.image_size < 32:
        raise ConfigError(f"scenegen.image_size must be >= 32, got {sg.image_size}")
    if sg.num_classes < 3:
        raise ConfigError(f"scenegen.num_classes must be >= 3 (background + >= 2 shapes), got {sg.num_classes}")
    if not (1 <= sg.min_objects <= sg.max_objects):
        raise ConfigError(
            f"scenegen.min_objects ({sg.min_objects}) and scenegen.max_objects "
            f"({sg.max_objects}) must satisfy 1 <= min <= max"
        )
    if sg.scene_count < 1:
        raise ConfigError(f"scenegen.scene_count must be >= 1, got {sg.scene_count}")

    au = cfg.augment
    if not (0.0 < au.crop_scale_min <= au.crop_scale_max <= 1.0):
        raise ConfigError(
            f"augment.crop_scale_min ({au.crop_scale_min}) and augment.crop_scale_max "
            f"({au.crop_scale_max}) must satisfy 0 < min <= max <= 1"
        )
    if not (0.0 < au.crop_ratio_min <= au.crop_ratio_max):
        raise ConfigError(
            f"augment.crop_ratio_min ({au.crop_ratio_min}) and augment.crop_ratio_max "
            f"({au.crop_ratio_max}) must satisfy 0 < min <= max"
        )
    for key in ("flip_p", "jitter_p", "grayscale_p", "blur_p_first", "blur_p_second"):
        v = getattr(au, key)
        if not (0.0 <= v <= 1.0):
            raise ConfigError(f"augment.{key} must be in [0, 1], got {v}")
    if not (0.0 < au.blur_sigma_min <= au.blur_sigma_max):
        raise ConfigError(
            f"augment.blur_sigma_min ({au.blur_sigma_min}) and augment.blur_sigma_max "
            f"({au.blur_sigma_max}) must satisfy 0 < min <= max"
        )

    en = cfg.encoder
    if len(en.channels) != 4:
        raise ConfigError(f"encoder.channels must have 4 entries (stem, s2, s3, s4), got {en.channels}")
    if len(en.blocks) != 3:
        raise ConfigError(f"encoder.blocks must have 3 entries, got {en.blocks}")
    if en.blocks[0] < 2:
        raise ConfigError(f"encoder.blocks[0] must be >= 2 so the s2.b2 tap exists, got {en.blocks[0]}")
    known_stages = {"s2", "s2.b2", "s3", "s4"}
    for name in en.fusion_layers:
        if name not in known_stages:
            raise ConfigError(f"encoder.fusion_layers contains unknown stage {name!r}")
    if en.dtype not in ("float32", "float64"):
        raise ConfigError(f"encoder.dtype must be float32 or float64, got {en.dtype!r}")
    if en.ema_schedule not in ("constant", "cosine"):
        raise ConfigError(f"encoder.ema_schedule must be constant or cosine, got {en.ema_schedule!r}")
    if not (0.0 <= en.ema_momentum <= 1.0):
        raise ConfigError(f"encoder.ema_momentum must be in [0, 1], got {en.ema_momentum}")

    co = cfg.contrast
    if co.temperature <= 0:
        raise ConfigError(f"contrast.temperature must be > 0, got {co.temperature}")
    if co.n_neg < 0:
        raise ConfigError(f"contrast.n_neg must be >= 0, got {co.n_neg}")

    bo = cfg.bootstrap
    if not (2 <= bo.k_min <= bo.k_max):
        raise ConfigError(
            f"bootstrap.k_min ({bo.k_min}) and bootstrap.k_max ({bo.k_max}) "
            f"must satisfy 2 <= k_min <= k_max"
        )
    if bo.stage not in known_stages:
        raise ConfigError(f"bootstrap.stage must be one of {sorted(known_stages)}, got {bo.stage!r}")
    if bo.cluster_batch < 1:
        raise ConfigError(f"bootstrap.cluster_batch must be >= 1, got {bo.cluster_batch}")
    if bo.kmeans_iters < 1:
        raise ConfigError(f"bootstrap.kmeans_iters must be >= 1, got {bo.kmeans_iters}")

    cs = cfg.consistency
    if cs.kappa < 0:
        raise ConfigError(f"consistency.kappa must be >= 0, got {cs.kappa}")
    if cs.lambda_vmf < 0:
        raise ConfigError(f"consistency.lambda_vmf must be >= 0, got {cs.lambda_vmf}")
    if cs.warmup_k is not None and cs.warmup_k < 1:
        raise ConfigError(f"consistency.warmup_k must be >= 1, got {cs.warmup_k}")
    if cs.stage not in known_stages:
        raise ConfigError(f"consistency.stage must be one of {sorted(known_stages)}, got {cs.stage!r}")

    tr = cfg.trainer
    if tr.epochs < 1:
        raise ConfigError(f"trainer.epochs must be >= 1, got {tr.epochs}")
    if tr.warmup_epochs < 1:
        raise ConfigError(f"trainer.warmup_epochs must be >= 1, got {tr.warmup_epochs}")
    if tr.bootstrap_period is not None and tr.bootstrap_period < 1:
        raise ConfigError(f"trainer.bootstrap_period must be >= 1 or null, got {tr.bootstrap_period}")
    if tr.consistency_period < 1:
        raise ConfigError(f"trainer.consistency_period must be >= 1, got {tr.consistency_period}")
    if tr.batch_size < 1:
        raise ConfigError(f"trainer.batch_size must be >= 1, got {tr.batch_size}")
    if tr.lr <= 0:
        raise ConfigError(f"trainer.lr must be > 0, got {tr.lr}")
    if tr.mask_mode not in ("bootstrap", "random_crop", "grid", "ground_truth"):
        raise ConfigError(f"trainer.mask_mode must be one of bootstrap/random_crop/grid/ground_truth, got {tr.mask_mode!r}")

    pr = cfg.probe
    if pr.stage not in known_stages:
        raise ConfigError(f"probe.stage must be one of {sorted(known_stages)}, got {pr.stage!r}")
    if pr.steps < 0:
        raise ConfigError(f"probe.steps must be >= 0, got {pr.steps}")
    if not (0.0 < pr.holdout_fraction < 1.0):
        raise ConfigError(f"probe.holdout_fraction must be in (0, 1), got {pr.holdout_fraction}")

    if cfg.format_version != FORMAT_VERSION:
        raise ConfigError(
            f"format_version {cfg.format_version} unsupported (this build reads {FORMAT_VERSION})"
        )
