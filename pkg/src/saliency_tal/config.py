"""Run configuration: one JSON document, strict keys, dotted-path overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .attention import AttentionConfig
from .encoder import EncoderConfig
from .evaluation import DEFAULT_THRESHOLDS
from .heads import DEFAULT_RANGES, DELTA_BASE, HeadConfig
from .model import ModelConfig
from .postprocess import NmsConfig
from .synth import GeneratorConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    d_in: int | None = None            # defaults to data.feature_dim
    d_model: int = 64
    levels: int = 6
    blocks_per_level: int = 1
    stem_blocks: int = 2
    ffn_expansion: int = 4
    heads: int = 4
    window: int = 9
    keep_ratio: float = 0.5
    variant: str = "per-head-topk"
    qkv_conv_width: int = 3
    num_classes: int | None = None     # defaults to data.num_classes
    head_conv_layers: int = 2
    regression_ranges: tuple = tuple((lo, None if math.isinf(hi) else hi) for lo, hi in DEFAULT_RANGES)
    prior_prob: float = 0.01
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    reg_weight: float = 1.0
    delta: float = DELTA_BASE


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: int = 2
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("lr and weight_decay must be >= 0, grad_clip > 0")


@dataclass(frozen=True)
class EvalSection:
    thresholds: tuple = DEFAULT_THRESHOLDS


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    nms: NmsConfig = field(default_factory=NmsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved(self) -> "RunConfig":
        m = self.model
        if m.d_in is None or m.num_classes is None:
            m = dataclasses.replace(m, d_in=m.d_in or self.data.feature_dim,
                                    num_classes=m.num_classes or self.data.num_classes)
        return dataclasses.replace(self, model=m)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def model_config(self) -> ModelConfig:
        m = self.resolved().model
        att = AttentionConfig(d_model=m.d_model, heads=m.heads, window=m.window, keep_ratio=m.keep_ratio,
                              variant=m.variant, qkv_conv_width=m.qkv_conv_width)
        enc = EncoderConfig(d_in=m.d_in, d_model=m.d_model, levels=m.levels,
                            blocks_per_level=m.blocks_per_level, stem_blocks=m.stem_blocks,
                            ffn_expansion=m.ffn_expansion, attention=att)
        ranges = tuple((lo, math.inf if hi is None else hi) for lo, hi in m.regression_ranges)
        head = HeadConfig(num_classes=m.num_classes, head_conv_layers=m.head_conv_layers,
                          regression_ranges=ranges, prior_prob=m.prior_prob, focal_alpha=m.focal_alpha,
                          focal_gamma=m.focal_gamma, reg_weight=m.reg_weight)
        return ModelConfig(enc, head, delta=m.delta, clip_duration=self.data.clip_s)

    def model_hash(self) -> str:
        """SHA-256 over the resolved model section (what a checkpoint must agree with)."""
        blob = json.dumps(_to_plain(self.resolved().model), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else _tuplify(value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_SECTIONS = {(RunConfig, "model"): ModelSection, (RunConfig, "nms"): NmsConfig,
             (RunConfig, "train"): TrainConfig, (RunConfig, "data"): GeneratorConfig,
             (RunConfig, "eval"): EvalSection}


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    try:
        cfg.model_config()  # model-section values are checked by the component configs
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return data


def load(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    if overrides:
        data = apply_overrides(data, overrides)
    return from_dict(data).resolved()


def dump(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
