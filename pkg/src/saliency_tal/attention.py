"""Multi-head local-window attention with saliency-based Top-M token pruning.

For every query position and head, the candidate keys are the ``W`` positions
centred on the query.  Each candidate gets a saliency score, the ``M`` best
are kept (the query itself always among them), and attention is a softmax
over the survivors only.  Three pruning rules are supported plus an
unpruned reference:

``per-head-topk``
    score = q.k / sqrt(d_head), ranked independently for each head.
``head-shared-topk``
    same scores averaged over heads; every head keeps the same set.
``static-key-norm``
    score = ||k||, independent of the query.
``dense``
    no pruning (every valid window key is kept).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

VARIANTS = ("per-head-topk", "head-shared-topk", "static-key-norm", "dense")


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    heads: int = 4
    window: int = 9
    keep_ratio: float = 0.5
    variant: str = "per-head-topk"
    qkv_conv_width: int = 3

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 1, got {self.window}")
        if not 0.0 < self.keep_ratio <= 1.0:
            raise ValueError(f"keep_ratio must lie in (0, 1], got {self.keep_ratio}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.qkv_conv_width < 1 or self.qkv_conv_width % 2 == 0:
            raise ValueError(f"qkv_conv_width must be odd, got {self.qkv_conv_width}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def budget(self) -> int:
        """Tokens kept per (query, head) window."""
        if self.variant == "dense":
            return self.window
        # guard against float fuzz such as 0.5 * 9 = 4.5000000001
        return max(1, min(self.window, math.ceil(round(self.keep_ratio * self.window, 9))))


def init_params(cfg: AttentionConfig, rng: np.random.Generator, prefix: str = "attn") -> dict[str, Tensor]:
    d, w = cfg.d_model, cfg.qkv_conv_width
    params = {}
    for name in ("q", "k", "v"):
        dw = np.zeros((w, d))
        dw[w // 2] = 1.0
        dw += rng.normal(0.0, 0.02, size=(w, d))
        params[f"{prefix}.{name}_dw.weight"] = dw
        params[f"{prefix}.{name}.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
        # a key bias shifts every logit of a row equally, so it would never get a gradient
        if name != "k":
            params[f"{prefix}.{name}_dw.bias"] = np.zeros(d)
            params[f"{prefix}.{name}.bias"] = np.zeros(d)
    params[f"{prefix}.out.weight"] = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d))
    params[f"{prefix}.out.bias"] = np.zeros(d)
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = nx.reshape(x, (*lead, T, heads, d // heads))
    return nx.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, dh = x.shape
    x = nx.swapaxes(x, -2, -3)
    return nx.reshape(x, (*lead, T, H * dh))


def project_qkv(x: Tensor, cfg: AttentionConfig, params: dict[str, Tensor],
                prefix: str = "attn") -> tuple[Tensor, Tensor, Tensor]:
    """Depthwise temporal conv then a full linear map, per Q/K/V; split into heads."""
    out = []
    for name in ("q", "k", "v"):
        y = nx.conv1d(x, params[f"{prefix}.{name}_dw.weight"], params.get(f"{prefix}.{name}_dw.bias"),
                      depthwise=True)
        y = nx.linear(y, params[f"{prefix}.{name}.weight"], params.get(f"{prefix}.{name}.bias"))
        out.append(_split_heads(y, cfg.heads))
    return tuple(out)


def window_validity(mask: np.ndarray, window: int) -> np.ndarray:
    """``valid[..., t, w]``: key ``t + w - window//2`` is in range and unmasked."""
    mask = np.asarray(mask, dtype=bool)
    r = window // 2
    T = mask.shape[-1]
    padded = np.pad(mask, [(0, 0)] * (mask.ndim - 1) + [(r, r)])
    return np.stack([padded[..., w:w + T] for w in range(window)], axis=-1)


def _key_norms_windowed(k: np.ndarray, window: int) -> np.ndarray:
    r = window // 2
    T = k.shape[-2]
    norms = np.sqrt((k ** 2).sum(axis=-1))
    padded = np.pad(norms, [(0, 0)] * (norms.ndim - 1) + [(r, r)])
    return np.stack([padded[..., w:w + T] for w in range(window)], axis=-1)


def saliency_scores(q: np.ndarray, k: np.ndarray, variant: str, window: int) -> np.ndarray:
    """Saliency of every window slot: array ``[..., H, T, W]``.

    Out-of-range slots hold meaningless values and must be masked by the caller.
    """
    if variant == "static-key-norm":
        return _key_norms_windowed(k, window)
    with nx.no_grad():
        s = nx.local_scores(Tensor(q, dtype=q.dtype), Tensor(k, dtype=k.dtype), window).data
    s = s / math.sqrt(q.shape[-1])
    if variant == "head-shared-topk":
        s = np.broadcast_to(s.mean(axis=-3, keepdims=True), s.shape)
    return s


def select_top_m(scores: np.ndarray, valid: np.ndarray, budget: int) -> np.ndarray:
    """Boolean keep-mask over window slots.

    The centre slot is always kept (when valid) and counts towards ``budget``.
    Remaining slots are ranked by descending score; ties go to the slot closer
    to the centre, then to the lower absolute index.  When fewer than
    ``budget`` slots are valid, all valid slots are kept.
    """
    window = scores.shape[-1]
    r = window // 2
    valid = np.broadcast_to(valid, scores.shape)
    key = np.where(valid, scores, -np.inf)
    key = key.copy()
    key[..., r] = np.where(valid[..., r], np.inf, -np.inf)
    offsets = np.arange(window) - r
    dist = np.broadcast_to(np.abs(offsets), scores.shape)
    # absolute index = t + offset; within one row only the offset varies
    order = np.lexsort((np.broadcast_to(offsets, scores.shape), dist, -key), axis=-1)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(window), scores.shape), axis=-1)
    return (ranks < budget) & valid


def retained_indices(keep: np.ndarray, t: int) -> list[int]:
    """Absolute key indices kept for query ``t`` given its window keep-row."""
    r = keep.shape[-1] // 2
    return [t + w - r for w in np.flatnonzero(keep)]


def selection(x: Tensor, mask: np.ndarray, cfg: AttentionConfig, params: dict[str, Tensor],
              prefix: str = "attn") -> np.ndarray:
    """The keep-mask ``[..., H, T, W]`` the layer would use on ``x``."""
    with nx.no_grad():
        q, k, _ = project_qkv(x, cfg, params, prefix)
    return _keep_mask(q.data, k.data, np.asarray(mask, dtype=bool), cfg)


def _keep_mask(q: np.ndarray, k: np.ndarray, mask: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    valid = window_validity(mask, cfg.window)[..., None, :, :]
    # masked queries keep only themselves so their softmax stays defined
    centre_only = np.zeros(cfg.window, dtype=bool)
    centre_only[cfg.window // 2] = True
    valid = np.where(mask[..., None, :, None], valid, centre_only)
    valid = np.broadcast_to(valid, q.shape[:-1] + (cfg.window,))
    if cfg.budget >= cfg.window:
        return valid.copy()
    scores = saliency_scores(q, k, cfg.variant, cfg.window)
    return select_top_m(scores, valid, cfg.budget)


def sparse_local_attention(x: Tensor, mask: np.ndarray, cfg: AttentionConfig,
                           params: dict[str, Tensor], prefix: str = "attn") -> Tensor:
    """Pruned local attention over ``x[..., T, d_model]``; masked rows output zero."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match {x.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("attention over a fully masked sequence")
    q, k, v = project_qkv(x, cfg, params, prefix)
    keep = _keep_mask(q.data, k.data, mask, cfg)
    logits = nx.local_scores(q, k, cfg.window) * (1.0 / math.sqrt(cfg.d_head))
    weights = nx.softmax(logits, keep)
    heads = nx.local_aggregate(weights, v, cfg.window)
    out = nx.linear(_merge_heads(heads), params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])
    return nx.mask_rows(out, mask)


def full_attention(x: Tensor, cfg: AttentionConfig, params: dict[str, Tensor],
                   prefix: str = "attn") -> Tensor:
    """Unwindowed T x T attention with the same projections (complexity baseline)."""
    q, k, v = project_qkv(x, cfg, params, prefix)
    logits = nx.matmul(q, nx.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(cfg.d_head))
    heads = nx.matmul(nx.softmax(logits), v)
    return nx.linear(_merge_heads(heads), params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])
