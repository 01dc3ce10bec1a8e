"""Run configuration: a flat YAML key/value document plus command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

import yaml

from .backbone import BackboneConfig
from .events import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # input: an event CSV path, or None for synthetic scenes
    input: str | None = None
    width: int = 64
    height: int = 64
    n_time_bins: int = 2
    sample_duration_us: int = 50_000
    # backbone
    embed_dim: int = 16
    window_side: int = 4
    strides: list = field(default_factory=lambda: [4, 2, 2, 2])
    depths: list = field(default_factory=lambda: [1, 1, 1, 1])
    head_dim: int = 16
    mlp_ratio: int = 4
    embed_gain: float = 1e4
    merge_gain: float = 1.0
    init: str = "reference"
    param_seed: int = 0
    # sparsification
    a: float = 0.0002
    b: float = 0.099
    p: float = 1.0
    eps_F: float = 1e-8
    mask_value: float = -1e9
    weight_fn: str = "sigmoid"
    cb_enabled: bool = False
    share_token_selection: bool = True
    keep_all: bool = False
    mode: str = "sast"
    fixed_ratio: float = 0.5
    # synthetic suite
    seed: int = 0
    samples: int = 1
    density: list = field(default_factory=lambda: [0.5])
    n_objects: int = 3
    object_size: int = 10
    noise_rate: float = 0.0
    # sweep grids
    a_grid: list = field(default_factory=lambda: [0.0002])
    b_grid: list = field(default_factory=lambda: [0.099])
    # output
    out: str = "sast_out"
    numeric: str | None = None  # None defers to SAST_NUMERIC
    workers: int = 1
    write_images: bool = True

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            height=self.height, width=self.width, n_time_bins=self.n_time_bins,
            embed_dim=self.embed_dim, strides=tuple(self.strides), window_side=self.window_side,
            depths=tuple(self.depths), head_dim=self.head_dim, mlp_ratio=self.mlp_ratio,
            a=self.a, b=self.b, p=self.p, eps_F=self.eps_F, mask_value=self.mask_value,
            weight_fn=self.weight_fn, cb_enabled=self.cb_enabled,
            share_token_selection=self.share_token_selection, keep_all=self.keep_all,
            mode=self.mode, fixed_ratio=self.fixed_ratio, init=self.init,
            param_seed=self.param_seed, embed_gain=self.embed_gain, merge_gain=self.merge_gain,
        )

    def scene(self, density: float, seed: int) -> SceneSpec:
        return SceneSpec(density_level=density, n_objects=self.n_objects, object_size=self.object_size,
                         seed=seed, noise_rate=self.noise_rate, width=self.width, height=self.height,
                         duration_us=self.sample_duration_us)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_LIST_KEYS = {"strides", "depths", "density", "a_grid", "b_grid"}


def _coerce(key: str, value):
    default = getattr(RunConfig(), key)
    if key in _LIST_KEYS:
        if not isinstance(value, (list, tuple)):
            value = [value]
        return [type(default[0])(v) if default else v for v in value]
    if key in ("input", "numeric"):
        return None if value in (None, "") else str(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    try:
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None


def from_mapping(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for key, value in (data or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested values are not allowed in the flat config document")
        setattr(cfg, key, _coerce(key, value))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config document must be a flat key/value mapping")
    return from_mapping(data or {})


def dump_config(cfg: RunConfig, include_out: bool = True) -> str:
    d = cfg.to_dict()
    if not include_out:
        del d["out"]
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=None)


def validate(cfg: RunConfig) -> None:
    if cfg.numeric not in (None, "f64", "f32"):
        raise ConfigError("numeric must be f64 or f32")
    if cfg.samples < 1 or cfg.workers < 1:
        raise ConfigError("samples and workers must be >= 1")
    if any(not 0.0 <= d <= 1.0 for d in cfg.density):
        raise ConfigError("density levels must lie in [0, 1]")
    if cfg.sample_duration_us <= 0 or cfg.n_time_bins < 1:
        raise ConfigError("sample_duration_us and n_time_bins must be positive")
    try:
        cfg.backbone_config().stage_dims()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
