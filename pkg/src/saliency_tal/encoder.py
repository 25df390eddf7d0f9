"""Convolutional stem and the multi-level salient-context encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import attention as attn
from . import numerics as nx
from .attention import AttentionConfig
from .numerics import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 32
    d_model: int = 64
    levels: int = 6
    blocks_per_level: int = 1
    stem_blocks: int = 2
    ffn_expansion: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.attention.d_model != self.d_model:
            raise ValueError(f"attention d_model {self.attention.d_model} != encoder d_model {self.d_model}")

    @property
    def strides(self) -> list[int]:
        return [2 ** i for i in range(self.levels)]


@dataclass
class PyramidFeatures:
    features: list[Tensor]
    masks: list[np.ndarray]
    strides: list[int]

    @property
    def lengths(self) -> list[int]:
        return [f.shape[-2] for f in self.features]


def padded_length(T: int, levels: int) -> int:
    m = 2 ** (levels - 1)
    return -(-T // m) * m


def level_lengths(T: int, levels: int) -> list[int]:
    tp = padded_length(T, levels)
    return [tp // 2 ** i for i in range(levels)]


def _block_names(cfg: EncoderConfig) -> list[str]:
    names = [f"stem.{i}" for i in range(cfg.stem_blocks)]
    for level in range(1, cfg.levels):
        names += [f"level{level}.{i}" for i in range(cfg.blocks_per_level)]
    return names


def init_block(cfg: EncoderConfig, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    d, h = cfg.d_model, cfg.d_model * cfg.ffn_expansion
    params = attn.init_params(cfg.attention, rng, prefix=f"{prefix}.attn")
    raw = {
        f"{prefix}.ln1.gain": np.ones(d), f"{prefix}.ln1.bias": np.zeros(d),
        f"{prefix}.ln2.gain": np.ones(d), f"{prefix}.ln2.bias": np.zeros(d),
        f"{prefix}.ffn1.weight": rng.normal(0, 1 / math.sqrt(d), (d, h)),
        f"{prefix}.ffn1.bias": np.zeros(h),
        f"{prefix}.ffn2.weight": rng.normal(0, 1 / math.sqrt(h), (h, d)),
        f"{prefix}.ffn2.bias": np.zeros(d),
    }
    params.update({k: Tensor(v, requires_grad=True) for k, v in raw.items()})
    return params


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {
        "proj.weight": Tensor(rng.normal(0, 1 / math.sqrt(3 * cfg.d_in), (3, cfg.d_in, cfg.d_model)),
                              requires_grad=True),
        "proj.bias": Tensor(np.zeros(cfg.d_model), requires_grad=True),
    }
    for name in _block_names(cfg):
        params.update(init_block(cfg, rng, name))
    return params


def project(x: Tensor, mask: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    x = nx.mask_rows(x, mask)
    y = nx.conv1d(x, params["proj.weight"], params["proj.bias"])
    return nx.mask_rows(nx.gelu(y), mask)


def encoder_block(x: Tensor, mask: np.ndarray, cfg: EncoderConfig, params: dict[str, Tensor],
                  prefix: str) -> Tensor:
    """Pre-norm block: attention residual then feed-forward residual."""
    h = nx.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    h = nx.mask_rows(h, mask)
    y = x + attn.sparse_local_attention(h, mask, cfg.attention, params, prefix=f"{prefix}.attn")
    h = nx.layer_norm(y, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    h = nx.gelu(nx.linear(h, params[f"{prefix}.ffn1.weight"], params[f"{prefix}.ffn1.bias"]))
    h = nx.linear(h, params[f"{prefix}.ffn2.weight"], params[f"{prefix}.ffn2.bias"])
    return nx.mask_rows(y + h, mask)


def downsample(x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    return nx.max_pool2(x, mask)


def pad_to_pyramid(x: Tensor, mask: np.ndarray, levels: int) -> tuple[Tensor, np.ndarray]:
    T = x.shape[-2]
    tp = padded_length(T, levels)
    if tp == T:
        return x, np.asarray(mask, dtype=bool)
    extra = np.zeros(x.shape[:-2] + (tp - T, x.shape[-1]), dtype=x.data.dtype)
    mask = np.concatenate([np.asarray(mask, dtype=bool),
                           np.zeros(mask.shape[:-1] + (tp - T,), dtype=bool)], axis=-1)
    return nx.concat([x, Tensor(extra, dtype=x.data.dtype)], axis=-2), mask


def encode(features: Tensor, mask: np.ndarray | None, cfg: EncoderConfig,
           params: dict[str, Tensor]) -> PyramidFeatures:
    """Encode ``features[..., T, d_in]`` into an L-level pyramid."""
    if mask is None:
        mask = np.ones(features.shape[:-1], dtype=bool)
    x, mask = pad_to_pyramid(features, mask, cfg.levels)
    x = project(x, mask, params)
    for i in range(cfg.stem_blocks):
        x = encoder_block(x, mask, cfg, params, f"stem.{i}")
    feats, masks = [x], [mask]
    for level in range(1, cfg.levels):
        x, mask = downsample(x, mask)
        for i in range(cfg.blocks_per_level):
            x = encoder_block(x, mask, cfg, params, f"level{level}.{i}")
        feats.append(x)
        masks.append(mask)
    return PyramidFeatures(feats, masks, cfg.strides)
