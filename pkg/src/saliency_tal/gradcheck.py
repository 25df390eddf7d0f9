"""Finite-difference checks of every differentiable component on a tiny 64-bit model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import encoder as enc
from . import heads
from . import model as mdl
from . import numerics as nx
from .attention import AttentionConfig
from .encoder import EncoderConfig
from .heads import HeadConfig
from .model import ModelConfig
from .numerics import Tensor
from .structures import Segment

TOLERANCES = {
    "project_qkv": 1e-5,
    "attention": 1e-4,
    "encoder_block": 1e-4,
    "encoder": 1e-4,
    "classify_head": 1e-5,
    "regress_head": 1e-5,
    "loss": 1e-3,
}

# the composite loss has many near-zero gradient entries; a wider step keeps
# central-difference roundoff (about eps * |loss| / h) below the tolerance
LOSS_STEP = 1e-4


@dataclass
class CheckResult:
    component: str
    worst: float
    tolerance: float
    num_params: int

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.component:<14} worst rel. err {self.worst:.3e}  tol {self.tolerance:.0e}  " \
               f"({self.num_params} values)  {status}"


def tiny_model_config(variant: str = "per-head-topk", window: int = 9, keep_ratio: float = 0.5,
                      num_classes: int = 3) -> ModelConfig:
    att = AttentionConfig(d_model=8, heads=2, window=window, keep_ratio=keep_ratio, variant=variant)
    return ModelConfig(EncoderConfig(d_in=6, d_model=8, levels=3, attention=att),
                       HeadConfig(num_classes=num_classes), clip_duration=16 * heads.DELTA_BASE)


def _weighted_sum(ts: list[Tensor], weights: list[np.ndarray]) -> Tensor:
    total = nx.sum(ts[0] * weights[0])
    for t, w in zip(ts[1:], weights[1:]):
        total = total + nx.sum(t * w)
    return total


def _count(params) -> int:
    return int(sum(p.data.size for p in params))


def generic_point(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.2) -> dict[str, Tensor]:
    """Jitter every parameter so no gradient sits at a special (prior-bias, zero-output) value."""
    for p in params.values():
        p.data += rng.normal(0.0, scale, size=p.shape)
    return params


def run_all(seed: int = 0, variant: str = "per-head-topk", window: int = 9, keep_ratio: float = 0.5,
            h: float = 1e-5, only: list[str] | None = None) -> list[CheckResult]:
    """One result per component (or per name in ``only``); always evaluated in 64-bit precision."""
    unknown = set(only or ()) - set(TOLERANCES)
    if unknown:
        raise ValueError(f"unknown component(s) {sorted(unknown)}")
    wanted = set(only or TOLERANCES)
    results = []

    def check(name, fn, ps):
        if name in wanted:
            results.append(CheckResult(name, nx.grad_check(fn, ps, h=max(h, LOSS_STEP) if name == "loss" else h),
                                       TOLERANCES[name], _count(ps)))

    with nx.precision(64):
        rng = np.random.default_rng(seed)
        cfg = tiny_model_config(variant, window, keep_ratio)
        ecfg, acfg = cfg.encoder, cfg.encoder.attention
        T = 16

        ap = attn.init_params(acfg, rng)
        x = Tensor(rng.normal(size=(T, acfg.d_model)), requires_grad=True)
        mask = np.ones(T, dtype=bool)
        mask[-3:] = False
        w3 = [rng.normal(size=(acfg.heads, T, acfg.d_head)) for _ in range(3)]
        ps = [x] + list(ap.values())
        check("project_qkv", lambda: _weighted_sum(list(attn.project_qkv(x, acfg, ap)), w3), ps)

        wo = rng.normal(size=(T, acfg.d_model))
        check("attention", lambda: nx.sum(attn.sparse_local_attention(x, mask, acfg, ap) * wo), ps)

        bp = enc.init_block(ecfg, rng, "blk")
        ps = [x] + list(bp.values())
        check("encoder_block", lambda: nx.sum(enc.encoder_block(x, mask, ecfg, bp, "blk") * wo), ps)

        params = generic_point(mdl.init_params(cfg, seed), rng)
        feats = Tensor(rng.normal(size=(T, ecfg.d_in)), requires_grad=True)
        lengths = enc.level_lengths(T, ecfg.levels)
        wl = [rng.normal(size=(n, ecfg.d_model)) for n in lengths]
        enc_params = [feats] + [p for k, p in params.items() if not k.startswith(("cls.", "reg.", "scale."))]
        check("encoder", lambda: _weighted_sum(enc.encode(feats, None, ecfg, params).features, wl), enc_params)

        with nx.no_grad():
            pyr = enc.encode(feats, None, ecfg, params)
        pyr = enc.PyramidFeatures([Tensor(f.data, requires_grad=True) for f in pyr.features],
                                  pyr.masks, pyr.strides)
        wc = [rng.normal(size=(n, cfg.head.num_classes)) for n in lengths]
        cls_params = pyr.features + [p for k, p in params.items() if k.startswith("cls.")]
        check("classify_head", lambda: _weighted_sum(heads.classify(pyr, params), wc), cls_params)
        wr = [rng.normal(size=(n, 2)) for n in lengths]
        reg_params = pyr.features + [p for k, p in params.items() if k.startswith("reg.")]
        check("regress_head", lambda: _weighted_sum(heads.regress(pyr, params), wr), reg_params)

        gt = [Segment(1, 0.2, 0.9), Segment(2, 1.0, 2.0)]
        clip = rng.normal(size=(1, T, ecfg.d_in))
        all_params = list(params.values())
        check("loss", lambda: mdl.batch_loss(params, clip, [gt], cfg)[0], all_params)
    return results
