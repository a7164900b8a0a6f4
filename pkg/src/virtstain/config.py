"""Run configuration: schema, defaults, YAML loading, env overrides.

Every knob declared by the other modules lives here under its section.
Unknown keys are rejected at load time; any `*_path`/`*_dir` string value
is resolved relative to the config file. Environment variables with the
``VIRTSTAIN_`` prefix override file values, using ``__`` to separate the
section from the key (``VIRTSTAIN_TRAINING__BATCH_SIZE=2``).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .generator import GeneratorConfig
from .losses import LossWeights
from .stain import StainMatrix

ENV_PREFIX = "VIRTSTAIN_"

DEFAULT_CLASSES = ("HER2", "Ki67", "ER", "PR")
DEFAULT_TISSUE_LABELS = (
    "invasive carcinoma",
    "adipose",
    "necrosis",
    "background",
    "stroma",
    "inflammatory infiltrate",
    "other tissue",
)


@dataclass
class StainSection:
    matrix: list = field(
        default_factory=lambda: [[0.650, 0.704, 0.286], [0.269, 0.568, 0.872]]
    )
    od_eps: float = 1.0 / 255.0
    hist_range: list = field(default_factory=lambda: [0.0, 3.0])
    hist_bins: int = 256
    hist_smoothing: float = 1e-8
    top_fraction: float = 0.10
    kl_direction: str = "real_gen"


@dataclass
class BackboneSection:
    kind: str = "toy"  # "toy" | "pretrained"
    seed: int = 7
    token_dim: int = 1024
    native_side: int = 64
    patch: int = 8
    spatial_mode: str = "tokens"  # "tokens" | "cls_grid" (coarse-grid ablation)
    weights_path: str | None = None  # adapter weights for kind="pretrained"


@dataclass
class ProcessorSection:
    channels: int = 512
    resblocks: int = 2


@dataclass
class GeneratorSection:
    resolution: int = 512
    encoder_channels: list = field(default_factory=lambda: [64, 128, 256, 512, 512])
    bottleneck_blocks: int = 4
    attention: bool = True
    cond_scales: list = field(default_factory=lambda: [32, 64, 128, 256])
    embedding_dim: int = 64
    classes: list = field(default_factory=lambda: list(DEFAULT_CLASSES))
    edge_channels: int = 16
    spade_hidden: int = 128
    use_edge_encoder: bool = True


@dataclass
class DiscSection:
    scales: int = 2
    channels: list = field(default_factory=lambda: [64, 128, 256, 512])
    r1_gamma: float = 1.0
    fm_layers: list | None = None  # None = all pre-logit layers


@dataclass
class LossSection:
    percept: float = 1.0
    l1: float = 1.0
    edge: float = 0.5
    adv: float = 1.0
    fm: float = 10.0
    dab: float = 0.2
    adv_start: int = 2000
    percept_sizes: list = field(default_factory=lambda: [128, 256])
    percept_size_weights: list = field(default_factory=lambda: [1.0, 0.5])
    percept_seed: int = 11
    percept_widths: list = field(default_factory=lambda: [8, 16, 32])
    edge_scales: list = field(default_factory=lambda: [512, 256])
    l1_size: int = 64


@dataclass
class TrainingSection:
    crop: int = 512
    batch_size: int = 4
    g_lr: float = 1e-4
    d_lr: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.99
    warmup_steps: int = 1000
    ema_decay: float = 0.999
    steps: int = 100_000
    epochs: int = 100
    drop_class_rate: float = 0.10
    drop_spatial_rate: float = 0.10
    drop_both_rate: float = 0.05
    stain_balance: str = "proportional"  # "proportional" | "uniform"
    log_every: int = 1
    checkpoint_every: int = 1000
    token_cache_entries: int = 512
    image_cache_entries: int = 64
    ablate_spatial: bool = False  # drop spatial conditioning every step
    ablate_class: bool = False  # drop the class token every step


@dataclass
class EvaluationSection:
    feature_dim: int = 64
    feature_seed: int = 123
    feature_side: int = 32
    shrinkage: float = 1e-6


@dataclass
class FailureSection:
    threshold: float = 0.5
    tissue_labels: list = field(default_factory=lambda: list(DEFAULT_TISSUE_LABELS))
    classifier_side: int = 224
    predictor_l2: float = 1e-3
    predictor_lr: float = 0.1
    predictor_steps: int = 500
    predictor_split: float = 0.8
    predictor_seed: int = 17


_SECTIONS = {
    "stain": StainSection,
    "backbone": BackboneSection,
    "processor": ProcessorSection,
    "generator": GeneratorSection,
    "disc": DiscSection,
    "loss": LossSection,
    "training": TrainingSection,
    "evaluation": EvaluationSection,
    "failure": FailureSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    device: str = "cpu"
    workers: int = 0
    stain: StainSection = field(default_factory=StainSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    processor: ProcessorSection = field(default_factory=ProcessorSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    disc: DiscSection = field(default_factory=DiscSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    failure: FailureSection = field(default_factory=FailureSection)

    # ---- constructors ----------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "RunConfig":
        data = dict(data or {})
        cfg = cls()
        for key in list(data):
            if key in ("seed", "device", "workers"):
                setattr(cfg, key, data.pop(key))
            elif key in _SECTIONS:
                section_cls = _SECTIONS[key]
                section_data = data.pop(key) or {}
                if not isinstance(section_data, dict):
                    raise ConfigError(f"section {key!r} must be a mapping")
                known = {f.name for f in fields(section_cls)}
                unknown = sorted(set(section_data) - known)
                if unknown:
                    raise ConfigError(f"unknown keys in section {key!r}: {unknown}")
                setattr(cfg, key, section_cls(**section_data))
            else:
                raise ConfigError(f"unknown top-level config key {key!r}")
        if base_dir is not None:
            cfg._resolve_paths(base_dir)
        return cfg

    @classmethod
    def from_yaml(cls, path: str | Path, env: dict | None = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config root of {path} must be a mapping")
        raw = _apply_env_overrides(raw, env if env is not None else os.environ)
        return cls.from_dict(raw, base_dir=path.parent).validate()

    def _resolve_paths(self, base_dir: Path) -> None:
        for section_name in _SECTIONS:
            section = getattr(self, section_name)
            for f in fields(section):
                if f.name.endswith(("_path", "_dir")):
                    value = getattr(section, f.name)
                    if isinstance(value, str) and value:
                        setattr(section, f.name, str((base_dir / value).resolve()))

    # ---- validation and derived objects ----------------------------------

    def validate(self) -> "RunConfig":
        self.generator_config()  # raises ConfigError on inconsistency
        rates = (
            self.training.drop_class_rate,
            self.training.drop_spatial_rate,
            self.training.drop_both_rate,
        )
        if min(rates) < 0 or sum(rates) > 1:
            raise ConfigError("conditioning drop rates must be nonnegative, sum <= 1")
        if self.training.d_lr <= self.training.g_lr:
            raise ConfigError("two-timescale rule requires d_lr > g_lr")
        if self.backbone.kind not in ("toy", "pretrained"):
            raise ConfigError(f"unknown backbone kind {self.backbone.kind!r}")
        if self.backbone.spatial_mode not in ("tokens", "cls_grid"):
            raise ConfigError(f"unknown spatial_mode {self.backbone.spatial_mode!r}")
        if len(self.stain.hist_range) != 2 or self.stain.hist_range[0] >= self.stain.hist_range[1]:
            raise ConfigError("stain.hist_range must be [lo, hi] with lo < hi")
        if len(self.failure.tissue_labels) < 2:
            raise ConfigError("need at least two tissue labels")
        if max(self.loss.edge_scales) > self.generator.resolution:
            raise ConfigError("loss.edge_scales cannot exceed the generator resolution")
        try:
            self.stain_matrix()
        except ValueError as exc:
            raise ConfigError(f"invalid stain.matrix: {exc}") from exc
        return self

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        try:
            return GeneratorConfig(
                resolution=g.resolution,
                encoder_channels=tuple(g.encoder_channels),
                bottleneck_blocks=g.bottleneck_blocks,
                attention=g.attention,
                cond_scales=tuple(g.cond_scales),
                cond_channels=self.processor.channels,
                embedding_dim=g.embedding_dim,
                num_classes=len(g.classes),
                edge_channels=g.edge_channels,
                spade_hidden=g.spade_hidden,
                use_edge_encoder=g.use_edge_encoder,
            ).validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid generator section: {exc}") from exc

    def stain_matrix(self) -> StainMatrix:
        return StainMatrix.from_config(self.stain.matrix)

    def loss_weights(self) -> LossWeights:
        ls = self.loss
        return LossWeights(
            percept=ls.percept,
            l1=ls.l1,
            edge=ls.edge,
            adv=ls.adv,
            fm=ls.fm,
            dab=ls.dab,
            adv_start=ls.adv_start,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce_env_value(raw: str):
    try:
        return yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw


def _apply_env_overrides(data: dict, env) -> dict:
    for name, raw in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        spec = name[len(ENV_PREFIX) :].lower()
        value = _coerce_env_value(raw)
        if "__" in spec:
            section, key = spec.split("__", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"env override {name}: unknown section {section!r}")
            data.setdefault(section, {})
            if not isinstance(data[section], dict):
                raise ConfigError(f"env override {name}: section {section!r} is not a mapping")
            data[section][key] = value
        else:
            if spec not in ("seed", "device", "workers"):
                raise ConfigError(f"env override {name}: unknown top-level key {spec!r}")
            data[spec] = value
    return data


def desk_scale_config(**training_overrides) -> RunConfig:
    """A small, fast configuration used by tests and smoke runs."""
    cfg = RunConfig()
    cfg.backbone = BackboneSection(kind="toy", seed=7, token_dim=64)
    cfg.processor = ProcessorSection(channels=32, resblocks=1)
    cfg.generator = GeneratorSection(
        resolution=64,
        encoder_channels=[16, 32, 64],
        bottleneck_blocks=2,
        attention=True,
        cond_scales=[16, 32],
        embedding_dim=8,
        classes=list(DEFAULT_CLASSES),
        edge_channels=4,
        spade_hidden=16,
    )
    cfg.disc = DiscSection(scales=2, channels=[16, 32])
    cfg.loss = LossSection(
        percept_sizes=[16, 32],
        percept_widths=[4, 8],
        edge_scales=[64, 32],
        l1_size=16,
    )
    cfg.training = TrainingSection(crop=64, batch_size=2, steps=200)
    cfg.evaluation = EvaluationSection(feature_dim=16, feature_side=16)
    for key, value in training_overrides.items():
        setattr(cfg.training, key, value)
    return cfg.validate()
