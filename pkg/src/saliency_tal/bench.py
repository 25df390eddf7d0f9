"""Wall-clock scaling of pruned local attention against full attention."""

from __future__ import annotations

import statistics
import time

import numpy as np

from . import attention as attn
from . import numerics as nx
from .attention import AttentionConfig
from .numerics import Tensor


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def growth_exponent(lengths, times) -> float:
    """Least-squares slope of log(time) against log(T)."""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def run(cfg: AttentionConfig, lengths: list[int], repeats: int = 10, warmup: int = 2, seed: int = 0) -> dict:
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be ascending")
    rng = np.random.default_rng(seed)
    rows = []
    with nx.precision(32), nx.no_grad():
        params = attn.init_params(cfg, rng)
        for T in lengths:
            x = Tensor(rng.normal(size=(T, cfg.d_model)))
            mask = np.ones(T, dtype=bool)
            sparse = _median_time(lambda: attn.sparse_local_attention(x, mask, cfg, params), repeats, warmup)
            dense = _median_time(lambda: attn.full_attention(x, cfg, params), repeats, warmup)
            rows.append({"T": T, "sparse_s": sparse, "dense_s": dense,
                         "sparse_per_token_us": 1e6 * sparse / T, "dense_per_token_us": 1e6 * dense / T})
    Ts = [r["T"] for r in rows]
    return {
        "config": {"d_model": cfg.d_model, "heads": cfg.heads, "window": cfg.window,
                   "keep_ratio": cfg.keep_ratio, "variant": cfg.variant},
        "repeats": repeats,
        "rows": rows,
        "sparse_exponent": growth_exponent(Ts, [r["sparse_s"] for r in rows]),
        "dense_exponent": growth_exponent(Ts, [r["dense_s"] for r in rows]),
    }


def format_table(result: dict) -> str:
    lines = [f"{'T':>6} {'sparse ms':>10} {'dense ms':>10} {'sparse us/tok':>14} {'dense us/tok':>13}"]
    for r in result["rows"]:
        lines.append(f"{r['T']:>6} {r['sparse_s'] * 1e3:>10.3f} {r['dense_s'] * 1e3:>10.3f} "
                     f"{r['sparse_per_token_us']:>14.2f} {r['dense_per_token_us']:>13.2f}")
    lines.append(f"growth exponent: sparse {result['sparse_exponent']:.3f}, dense {result['dense_exponent']:.3f}")
    return "\n".join(lines)
