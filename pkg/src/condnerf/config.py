"""Dataclass configuration for models, rendering, priors and training runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class ModelConfig:
    dim_condition: int = 40
    dim_shape: int = 128
    dim_appearance: int = 128
    dim_feature: int = 128
    hidden: int = 128
    n_blocks: int = 8
    skip_at: int = 4
    point_octaves: int = 10
    dir_octaves: int = 4
    bg_dim_shape: int = 64
    bg_dim_appearance: int = 64
    bg_hidden: int = 64
    bg_n_blocks: int = 4
    bg_point_octaves: int = 10
    # Scene coordinates are divided by this before the background decoder sees them.
    bg_coord_scale: float = 5.0
    condition_background: bool = True
    feature_res: int = 16
    image_res: int = 64
    renderer_min_channels: int = 32
    disc_base_channels: int = 64
    disc_max_channels: int = 512


@dataclass
class RenderConfig:
    fov: float = 50.0
    n_samples: int = 64
    near: float | None = None
    far: float | None = None
    jitter: bool = True

    def depth_range(self, radius: float) -> tuple[float, float]:
        # Default range encloses the [-1, 1]^3 box seen from distance ``radius``.
        near = self.near if self.near is not None else max(radius - math.sqrt(3.0), 1e-3)
        far = self.far if self.far is not None else radius + math.sqrt(3.0)
        return near, far


@dataclass
class PriorConfig:
    """Uniform ranges for camera and object poses (degrees / scene units)."""

    azimuth: tuple[float, float] = (-45.0, 45.0)
    elevation: tuple[float, float] = (-10.0, 10.0)
    radius: tuple[float, float] = (2.732, 2.732)
    object_scale: tuple[float, float] = (0.8, 0.8)
    object_shift_x: tuple[float, float] = (0.0, 0.0)
    object_shift_y: tuple[float, float] = (0.0, 0.0)
    object_shift_z: tuple[float, float] = (0.0, 0.0)
    object_yaw: tuple[float, float] = (0.0, 0.0)

    def relative_view_range(self) -> tuple[float, float]:
        """Span of camera-azimuth-minus-object-yaw angles seen in training."""
        return (self.azimuth[0] - self.object_yaw[1], self.azimuth[1] - self.object_yaw[0])

    @property
    def center_camera(self) -> tuple[float, float, float]:
        return (sum(self.azimuth) / 2, sum(self.elevation) / 2, sum(self.radius) / 2)

    @property
    def center_object(self) -> dict:
        mid = lambda r: (r[0] + r[1]) / 2  # noqa: E731
        return {"scale": mid(self.object_scale),
                "translation": [mid(self.object_shift_x), mid(self.object_shift_y), mid(self.object_shift_z)],
                "yaw": mid(self.object_yaw)}


@dataclass
class TrainingConfig:
    lr_generator: float = 3e-4
    lr_discriminator: float = 1e-4
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    batch_size: int = 32
    r1_lambda: float = 10.0
    iterations: int = 100_000
    checkpoint_every: int = 5000
    log_every: int = 1
    seed: int = 0
    num_threads: int | None = None


@dataclass
class DataConfig:
    manifest: str | None = None
    resolution: int = 64
    fail_on_bad_image: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"

    def validate(self) -> None:
        t, m = self.train, self.model
        if t.lr_generator <= 0 or t.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if t.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if t.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if t.r1_lambda < 0:
            raise ValueError("r1_lambda must be nonnegative")
        if m.image_res % m.feature_res or not _is_pow2(m.image_res // m.feature_res):
            raise ValueError("image_res must be feature_res times a power of two")
        if m.image_res < 8 or not _is_pow2(m.image_res):
            raise ValueError("image_res must be a power of two >= 8")
        if self.data.resolution != m.image_res:
            raise ValueError("data.resolution must equal model.image_res")
        if not 0 < self.render.fov < 180:
            raise ValueError("fov must lie in (0, 180)")
        if self.render.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        for name in ("azimuth", "elevation", "radius", "object_scale", "object_shift_x",
                     "object_shift_y", "object_shift_z", "object_yaw"):
            lo, hi = getattr(self.prior, name)
            if lo > hi:
                raise ValueError(f"prior.{name} interval is inverted: ({lo}, {hi})")
        if self.prior.radius[0] <= 0 or self.prior.object_scale[0] <= 0:
            raise ValueError("radius and object scale must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name not in ("model", "render", "prior", "train", "data") else None
        sub = {"model": ModelConfig, "render": RenderConfig, "prior": PriorConfig,
               "train": TrainingConfig, "data": DataConfig}
        if cls is RunConfig and name in sub:
            kwargs[name] = _build(sub[name], value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a JSON/YAML config file (or defaults) and apply dotted-key overrides."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        data = data or {}
    cfg = RunConfig.from_dict(data)
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    cfg.validate()
    return cfg


def set_dotted(cfg: RunConfig, key: str, value: Any) -> None:
    section, _, name = key.partition(".")
    target = getattr(cfg, section, None) if name else cfg
    attr = name or section
    if target is None or not hasattr(target, attr):
        raise ValueError(f"unknown config key {key!r}")
    current = getattr(target, attr)
    if isinstance(value, str):
        value = _coerce(value, current)
    setattr(target, attr, value)


def _coerce(text: str, current: Any):
    if isinstance(current, bool):
        if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("1", "true", "yes")
    if isinstance(current, tuple):
        return tuple(float(v) for v in text.split(","))
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        try:
            return yaml.safe_load(text)
        except yaml.YAMLError:
            return text
    return text


def desk_config(dim_condition: int = 2) -> RunConfig:
    """Small configuration used by the synthetic smoke test: 32^2 images from 8^2 features."""
    cfg = RunConfig()
    m = cfg.model
    m.dim_condition = dim_condition
    m.dim_shape = m.dim_appearance = 32
    m.bg_dim_shape = m.bg_dim_appearance = 16
    m.dim_feature = 32
    m.hidden = 64
    m.bg_hidden = 32
    m.point_octaves = 6
    m.bg_point_octaves = 2
    m.feature_res = 8
    m.image_res = 32
    m.disc_base_channels = 32
    m.disc_max_channels = 64
    cfg.render.n_samples = 16
    cfg.train.batch_size = 16
    cfg.data.resolution = 32
    return cfg
