"""Experiment configuration: nested dataclasses loaded from strict YAML.

Unknown keys are rejected with the offending line number, so an ablation
flag can never be silently dropped by a typo.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import DEFAULT_FOV, CameraModel, CartesianRasterSpec, GridSpec, PolarSpec
from .synth import SceneRecipe

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.message = message
        self.line = line


@dataclass
class GridConfig:
    x_range: tuple[float, float] = (0.0, 50.0)
    y_range: tuple[float, float] = (-25.0, 25.0)
    resolution: float = 0.25


@dataclass
class PolarConfig:
    range_bins: int = 32
    azimuth_bins: int = 88
    max_range: float = 50.0


@dataclass
class CameraConfig:
    fov: float = DEFAULT_FOV
    image_width: int = 352
    image_height: int = 128
    camera_height: float = 1.5
    horizon_row: float = 16.0


@dataclass
class PreprocConfig:
    resize_height: int = 128
    resize_width: int = 352
    crop_height: int = 128
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    latent_channels: int = 64
    ae_widths: tuple[int, ...] = (32, 64, 128)
    # rescale latent cells to unit RMS before noise mixing (off: paper encoder)
    latent_norm: bool = False
    feature_channels: int = 32
    backbone_widths: tuple[int, ...] = (16, 24, 32)
    transformer_layers: int = 2
    transformer_heads: int = 4
    transformer_ff_mult: int = 4


@dataclass
class StageConfig:
    lr: float = 5e-4
    epochs: int = 50
    batch_size: int = 8


@dataclass
class TrainConfig:
    ae: StageConfig = field(default_factory=lambda: StageConfig(lr=5e-4))
    align: StageConfig = field(default_factory=lambda: StageConfig(lr=2e-5))
    finetune: StageConfig = field(default_factory=lambda: StageConfig(lr=2e-4))
    # jointly trained end-to-end baseline (task decomposition ablated)
    joint: StageConfig = field(default_factory=lambda: StageConfig(lr=5e-4))
    optimizer: str = "lion"
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    cosine: bool = True
    eta: float = 0.5
    weight_clip: tuple[float, float] = (0.1, 10.0)
    bce_eps: float = 1e-7


@dataclass
class AblationConfig:
    cst: bool = True
    td: bool = True
    cwt: bool = True
    ft: bool = True


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 20))
    bin_width: float = 5.0
    use_visibility: bool = True
    resample: str = "nearest"


@dataclass
class DataConfig:
    n: int = 2000
    seed: int = 0


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    profile: str = "desk"
    seed: int = 0
    grid: GridConfig = field(default_factory=GridConfig)
    polar: PolarConfig = field(default_factory=PolarConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    preprocess: PreprocConfig = field(default_factory=PreprocConfig)
    recipe: SceneRecipe = field(default_factory=SceneRecipe)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        validate(self)

    # -- derived specs -----------------------------------------------------
    @property
    def gspec(self) -> GridSpec:
        return GridSpec(tuple(self.grid.x_range), tuple(self.grid.y_range),
                        self.grid.resolution)

    @property
    def camera_model(self) -> CameraModel:
        return CameraModel(**dataclasses.asdict(self.camera))

    @property
    def pspec(self) -> PolarSpec:
        return PolarSpec(self.polar.range_bins, self.polar.azimuth_bins,
                         self.polar.max_range, self.camera.fov)

    @property
    def cspec(self) -> CartesianRasterSpec:
        return CartesianRasterSpec(self.polar.range_bins, self.polar.azimuth_bins)

    @property
    def target_shape(self) -> tuple[int, int]:
        return (self.polar.range_bins, self.polar.azimuth_bins)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.model.latent_channels, self.polar.range_bins // 8,
                self.polar.azimuth_bins // 8)

    @property
    def feature_shape(self) -> tuple[int, int]:
        return (self.preprocess.crop_height // 4, self.preprocess.resize_width // 4)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def hash(self) -> str:
        return _digest(self.to_dict())

    def model_hash(self) -> str:
        """Hash of everything that fixes parameter shapes and target geometry."""
        d = self.to_dict()
        keep = {k: d[k] for k in ("grid", "polar", "camera", "preprocess", "model")}
        keep["cst"] = d["ablation"]["cst"]
        keep["cwt"] = d["ablation"]["cwt"]
        return _digest(keep)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with top-level fields or ``section__field`` overrides replaced."""
        d = self.to_dict()
        for key, value in sections.items():
            if "__" in key:
                parts = key.split("__")
                node = d
                for p in parts[:-1]:
                    node = node[p]
                if parts[-1] not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node[parts[-1]] = value
            else:
                if key not in d:
                    raise ConfigError(f"unknown config key {key!r}")
                d[key] = value
        return from_dict(d)


def _digest(d) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def validate(cfg: ExperimentConfig):
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}")
    if cfg.profile not in ("desk", "paper"):
        raise ConfigError(f"profile must be 'desk' or 'paper', got {cfg.profile!r}")
    r, a = cfg.polar.range_bins, cfg.polar.azimuth_bins
    if r % 8 or a % 8:
        raise ConfigError(f"polar raster {r}x{a} is not divisible by the encoder stride 8")
    p = cfg.preprocess
    if p.crop_height > p.resize_height:
        raise ConfigError("crop_height exceeds resize_height")
    if p.crop_height % 4 or p.resize_width % 4:
        raise ConfigError("preprocessed image dims must be divisible by the backbone stride 4")
    fh, fw = cfg.feature_shape
    if fw != a:
        raise ConfigError(f"feature width {fw} must equal azimuth_bins {a}")
    if fh != r:
        raise ConfigError(f"feature height {fh} must equal range_bins {r}")
    if cfg.ablation.ft and not cfg.ablation.td:
        raise ConfigError("ablation flag ft requires td")
    if not 0.0 <= cfg.train.eta <= 1.0:
        raise ConfigError("eta must lie in [0, 1]")
    if cfg.train.optimizer not in ("lion", "adamw"):
        raise ConfigError(f"unknown optimizer {cfg.train.optimizer!r}")
    if not 0.0 <= cfg.train.warmup_frac < 1.0:
        raise ConfigError("warmup_frac must lie in [0, 1)")
    if cfg.polar.max_range > cfg.grid.x_range[1]:
        raise ConfigError("polar max_range exceeds the grid's forward extent")
    if cfg.eval.resample not in ("nearest", "bilinear"):
        raise ConfigError("eval.resample must be 'nearest' or 'bilinear'")
    ts = list(cfg.eval.thresholds)
    if not ts or any(not 0 < t < 1 for t in ts):
        raise ConfigError("eval.thresholds must be a non-empty list inside (0, 1)")
    if cfg.model.feature_channels % cfg.model.transformer_heads:
        raise ConfigError("feature_channels must be divisible by transformer_heads")
    # building the specs validates the remaining invariants
    try:
        cfg.gspec, cfg.camera_model, cfg.pspec
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _coerce(tp, value, path, marks):
    """Convert plain YAML values into dataclass instances, recursively."""
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{'.'.join(path) or 'config'} must be a mapping",
                              marks.get(tuple(path)))
        names = {f.name: f for f in dataclasses.fields(tp) if f.init}
        kwargs = {}
        for key, val in value.items():
            if key not in names:
                raise ConfigError(f"unknown key {'.'.join(path + [key])!r}",
                                  marks.get(tuple(path + [key])))
            kwargs[key] = _coerce(_field_type(tp, key), val, path + [key], marks)
        try:
            return tp(**kwargs)
        except ConfigError as exc:
            if exc.line is None and path:
                raise ConfigError(exc.message, marks.get(tuple(path))) from None
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{'.'.join(path) or 'config'}: {exc}",
                              marks.get(tuple(path))) from None
    if isinstance(value, list):
        return tuple(_coerce(None, v, path, marks) for v in value)
    return value


def _field_type(tp, name):
    hints = {"grid": GridConfig, "polar": PolarConfig, "camera": CameraConfig,
             "preprocess": PreprocConfig, "recipe": SceneRecipe, "model": ModelConfig,
             "train": TrainConfig, "ablation": AblationConfig, "eval": EvalConfig,
             "data": DataConfig}
    if tp is TrainConfig and name in ("ae", "align", "finetune", "joint"):
        return StageConfig
    if tp is ExperimentConfig and name in hints:
        return hints[name]
    return None


def _marks(node, path=(), out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = k.start_mark.line + 1
            _marks(v, key, out)
    return out


def from_dict(d: dict, marks: dict | None = None) -> ExperimentConfig:
    return _coerce(ExperimentConfig, d, [], marks or {})


def loads(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"parse error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if data is None:
        data = {}
    marks = _marks(node) if node is not None else {}
    try:
        return from_dict(data, marks)
    except ConfigError as exc:
        if source:
            raise ConfigError(exc.message, exc.line, source) from None
        raise


def load_recipe(path: str | Path) -> SceneRecipe:
    """Strictly parse a stand-alone scene recipe file."""
    path = Path(path)
    text = path.read_text()
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"parse error: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, str(path)) from None
    marks = _marks(node) if node is not None else {}
    try:
        return _coerce(SceneRecipe, data if data is not None else {}, [], marks)
    except ConfigError as exc:
        line = exc.line
        if line is None:
            # point at the first key named in the message
            hits = [ln for key, ln in marks.items() if len(key) == 1 and key[0] in exc.message]
            line = min(hits) if hits else None
        raise ConfigError(exc.message, line, str(path)) from None


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    return loads(path.read_text(), source=str(path))


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def paper_scale() -> ExperimentConfig:
    """Paper-scale geometry: 256x704 crops, 64x176 polar maps, 8x22 latents."""
    return ExperimentConfig(
        profile="paper",
        polar=PolarConfig(64, 176, 50.0),
        camera=CameraConfig(image_width=704, image_height=256, horizon_row=32.0),
        preprocess=PreprocConfig(resize_height=396, resize_width=704, crop_height=256),
        model=ModelConfig(feature_channels=64, backbone_widths=(32, 48, 64)),
    )
