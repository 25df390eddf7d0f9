"""Figures written next to the JSON/text outputs of ``eval``, ``train`` and ``bench``."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "saliency-tal",
}


def _figure(width: float = 5.0, height: float | None = None):
    golden = (5 ** 0.5 - 1) / 2
    return plt.subplots(figsize=(width, height or width * golden))


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else {"Date": None})
    plt.close(fig)
    return path


def map_vs_threshold(reports: dict[str, EvalReport], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for name, rep in reports.items():
            ax.plot(rep.thresholds, [v * 100 for v in rep.map_per_threshold], marker="o",
                    label=f"{name} ({rep.mean_ap * 100:.2f})")
        ax.set_xlabel("tIoU threshold")
        ax.set_ylabel("mAP (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        return _save(fig, path)


def per_class_ap(report: EvalReport, path: Path) -> Path:
    scored = [c for c, n in enumerate(report.num_gt) if n > 0]
    with plt.rc_context(STYLE):
        fig, ax = _figure(6.0, 0.35 * len(scored) + 1.2)
        means = [report.ap[c].mean() * 100 for c in scored]
        ax.barh(range(len(scored)), means, color="0.35")
        ax.set_yticks(range(len(scored)))
        ax.set_yticklabels([report.class_names[c] for c in scored])
        ax.invert_yaxis()
        ax.set_xlabel("AP averaged over thresholds (%)")
        ax.set_xlim(0, 100)
        return _save(fig, path)


def training_curves(history: list[dict], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        epochs = [h["epoch"] for h in history]
        ax.plot(epochs, [h["loss"] for h in history], label="total")
        ax.plot(epochs, [h["cls_loss"] for h in history], label="classification", ls="--")
        ax.plot(epochs, [h["reg_loss"] for h in history], label="regression", ls=":")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        scored = [h for h in history if "test_mAP" in h]
        if scored:
            ax2 = ax.twinx()
            ax2.plot([h["epoch"] for h in scored], [h["test_mAP"] * 100 for h in scored], color="C3",
                     marker=".", label="test mAP")
            ax2.set_ylabel("test mAP (%)")
            ax2.set_ylim(0, 100)
        ax.legend(frameon=False, loc="upper center")
        return _save(fig, path)


def attention_scaling(result: dict, path: Path) -> Path:
    rows = result["rows"]
    T = [r["T"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.loglog(T, [r["sparse_s"] * 1e3 for r in rows], marker="o",
                  label=f"pruned local (slope {result['sparse_exponent']:.2f})")
        ax.loglog(T, [r["dense_s"] * 1e3 for r in rows], marker="s",
                  label=f"full (slope {result['dense_exponent']:.2f})")
        ax.set_xlabel("sequence length T")
        ax.set_ylabel("median forward time (ms)")
        ax.legend(frameon=False)
        return _save(fig, path)
