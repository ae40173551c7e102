"""Run configuration: every hyperparameter, sampling count and ablation switch.

Configs are nested dataclasses that round-trip through JSON. Unknown keys are
rejected so a typo never silently falls back to a default.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .nets import ArchConfig


@dataclass
class DataConfig:
    source: str = "glyph"  # glyph | folder | manifest
    train_path: str | None = None
    test_path: str | None = None
    val_path: str | None = None
    num_classes: int = 30
    samples_per_class: int = 50
    image_size: tuple[int, int] = (32, 32)
    seed: int = 7
    train_fraction: float = 2 / 3
    val_classes: int = 0


@dataclass
class SamplingPlan:
    n_way: int = 5
    k_shot: int = 5
    k_query_in_per_class: int = 10
    k_query_out_total: int = 50
    episodes_train: int = 20000
    episodes_test: int = 800
    n_open_classes: int | None = None  # None: draw open queries from every non-support class

    @property
    def episode_size(self) -> int:
        return (self.n_way * self.k_shot + self.n_way * self.k_query_in_per_class
                + self.k_query_out_total)

    def validate(self):
        for name in ("n_way", "k_shot", "k_query_in_per_class", "k_query_out_total",
                     "episodes_train", "episodes_test"):
            if getattr(self, name) < 1:
                raise ConfigError(f"episodes.{name} must be >= 1")
        if self.n_open_classes is not None and self.n_open_classes < 1:
            raise ConfigError("episodes.n_open_classes must be >= 1 when set")


@dataclass
class ModelConfig:
    encoder: str = "vae"  # vae | ae
    d_z: int = 64
    channels: int = 32
    n_blocks: int = 4
    norm: str = "group"
    detector_hidden: tuple[int, ...] = (200, 100)
    tau_init: float = 10.0
    init_encoder_path: str | None = None


@dataclass
class LossConfig:
    lambda_vae: float = 1e-4
    lambda_ce: float = 10.0
    lambda_bce: float = 10.0
    reconstruction: str = "bce"  # bce | l2


@dataclass
class MethodConfig:
    exemplar_mode: str = "canonical"  # canonical | estimated | self_reconstruction | none
    prototype_mode: str = "weighted"  # weighted | mean
    modulation: bool = True
    kappa_distance: str = "l1"  # l1 | cosine
    exemplar_distance: str = "l2"  # l2 | cosine
    classifier_metric: str = "cosine"  # cosine | euclidean
    use_clf: bool = True
    use_embedding: bool = True
    use_recon_errors: bool = True
    open_score: str = "detector"  # detector | softmax


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_drop_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    regime: str = "joint"  # joint | two_stage
    stage1_episodes: int | None = None  # two_stage only; default half of episodes_train
    seed: int = 0
    checkpoint_every: int = 1000
    validate_every: int = 1000
    validation_episodes: int = 50
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    init_from_pretrained: bool = False
    dtype: str = "float32"


@dataclass
class EvalConfig:
    seed: int = 12345
    n_target_values: tuple[int, ...] = (5, 7, 10, 12, 15)
    sweep_episodes: int = 100
    lambda_vae_grid: tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
    lambda_bce_grid: tuple[float, ...] = (1.0, 5.0, 10.0, 15.0, 20.0)
    sweep_fixed_lambda_ce: float = 10.0
    sweep_fixed_lambda_bce: float = 10.0
    sweep_fixed_lambda_vae: float = 1e-4


_ENUMS = {
    ("data", "source"): ("glyph", "folder", "manifest"),
    ("model", "encoder"): ("vae", "ae"),
    ("model", "norm"): ("group", "batch", "none"),
    ("loss", "reconstruction"): ("bce", "l2"),
    ("method", "exemplar_mode"): ("canonical", "estimated", "self_reconstruction", "none"),
    ("method", "prototype_mode"): ("weighted", "mean"),
    ("method", "kappa_distance"): ("l1", "cosine"),
    ("method", "exemplar_distance"): ("l2", "cosine"),
    ("method", "classifier_metric"): ("cosine", "euclidean"),
    ("method", "open_score"): ("detector", "softmax"),
    ("train", "regime"): ("joint", "two_stage"),
    ("train", "dtype"): ("float32", "float64"),
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    episodes: SamplingPlan = field(default_factory=SamplingPlan)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> RunConfig:
        self.episodes.validate()
        for (section, key), allowed in _ENUMS.items():
            value = getattr(getattr(self, section), key)
            if value not in allowed:
                raise ConfigError(f"{section}.{key}={value!r} not in {allowed}")
        for key in ("lambda_vae", "lambda_ce", "lambda_bce"):
            if getattr(self.loss, key) < 0:
                raise ConfigError(f"loss.{key} must be >= 0")
        if self.train.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.train.lr_drop_every < 0:
            raise ConfigError("train.lr_drop_every must be >= 0")
        m = self.method
        if m.exemplar_mode == "none" and (m.use_recon_errors or m.prototype_mode == "weighted"):
            raise ConfigError(
                "exemplar_mode=none needs use_recon_errors=false and prototype_mode=mean")
        if not (m.use_clf or m.use_embedding or m.use_recon_errors):
            raise ConfigError("the detector needs at least one input block")
        if self.train.regime == "two_stage":
            s1 = self.stage1_episodes
            if not 0 < s1 < self.episodes.episodes_train:
                raise ConfigError("train.stage1_episodes must split episodes_train")
        self.arch()  # surfaces architecture errors early
        return self

    @property
    def stage1_episodes(self) -> int:
        if self.train.stage1_episodes is not None:
            return self.train.stage1_episodes
        return self.episodes.episodes_train // 2

    def arch(self) -> ArchConfig:
        m = self.method
        return ArchConfig(
            image_size=tuple(self.data.image_size),
            channels=self.model.channels,
            n_blocks=self.model.n_blocks,
            d_z=self.model.d_z,
            norm=self.model.norm,
            detector_hidden=tuple(self.model.detector_hidden),
            n_way=self.episodes.n_way,
            use_clf=m.use_clf,
            use_embedding=m.use_embedding,
            use_recon_errors=m.use_recon_errors,
            tau_init=self.model.tau_init,
        )

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        return _build(cls, d, "").validate()

    @classmethod
    def from_file(cls, path, overrides=()) -> RunConfig:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(apply_overrides(raw, overrides))

    def replace(self, **dotted) -> RunConfig:
        """Copy with dotted-key updates, e.g. ``replace(**{"loss.lambda_bce": 0})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            _set_dotted(d, key, value)
        return RunConfig.from_dict(d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, d: Any, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple) or (name in _TUPLE_FIELDS and value is not None):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_TUPLE_FIELDS = {"image_size", "detector_hidden", "n_target_values",
                 "lambda_vae_grid", "lambda_bce_grid"}


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {key}")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings onto a raw config dict filled with defaults."""
    base = RunConfig().to_dict()
    merged = _deep_merge(base, raw)
    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(merged, key, value)
    return merged


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def glyph_benchmark_config(**dotted) -> RunConfig:
    """Desk-scale 5-way 1-shot glyph setup used by the end-to-end benchmark."""
    cfg = RunConfig()
    d = cfg.to_dict()
    d["episodes"].update(n_way=5, k_shot=1, k_query_in_per_class=3, k_query_out_total=15,
                         episodes_train=3000, episodes_test=200)
    d["train"].update(lr=1e-3)
    for k, v in dotted.items():
        _set_dotted(d, k, v)
    return RunConfig.from_dict(d)
