"""Figures for the report commands. Files only; never opens a window."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .analysis import BudgetCurve, VarianceReport  # noqa: E402


def _save(fig, path, config_hash: str | None) -> None:
    fig.tight_layout()
    # the hash goes into a PNG text chunk so figures are traceable like every other output
    meta = {"Description": f"config_hash = {config_hash}"} if config_hash else None
    fig.savefig(path, dpi=120, metadata=meta)
    plt.close(fig)


def plot_budget(curves: Sequence[BudgetCurve], path, target: float | None = None,
                title: str = "", config_hash: str | None = None) -> None:
    """Held-out mIoU against cumulative generated tokens and wallclock, one line per algorithm."""
    fig, (ax_t, ax_w) = plt.subplots(1, 2, figsize=(10, 4))
    for c in curves:
        ax_t.plot(c.tokens, c.mean_iou, marker=".", label=c.algo)
        ax_w.plot([w / 1e3 for w in c.wallclock_ms], c.mean_iou, marker=".", label=c.algo)
    for ax, xlabel in ((ax_t, "tokens generated (cumulative)"), (ax_w, "wallclock (s)")):
        if target is not None:
            ax.axhline(target, color="grey", lw=0.8, ls="--")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("held-out mIoU")
        ax.set_ylim(0, 1.02)
        ax.legend()
    if title:
        fig.suptitle(title)
    _save(fig, path, config_hash)


def plot_variance(reports: Sequence[VarianceReport], path, config_hash: str | None = None) -> None:
    """Covariance trace per estimator, and the per-step vs cross-step split of the slice variance."""
    fig, (ax_tr, ax_dec) = plt.subplots(1, 2, figsize=(9, 3.5))
    names = [r.estimator for r in reports]
    ax_tr.bar(names, [r.trace_cov for r in reports], color="tab:blue")
    ax_tr.set_ylabel("trace of covariance")
    ax_tr.set_yscale("log")
    var = [r.decomposition["sum_var_terms"] for r in reports]
    cov = [2 * r.decomposition["sum_cov_terms"] for r in reports]
    ax_dec.bar(names, var, label="sum of per-step variances")
    ax_dec.bar(names, cov, bottom=var, label="2 x cross-step covariances")
    ax_dec.set_ylabel("slice variance")
    ax_dec.legend(fontsize=8)
    _save(fig, path, config_hash)


def plot_rounds(mious: Sequence[float], path, teacher_miou: float | None = None,
                config_hash: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = list(range(1, len(mious) + 1))
    ax.plot(xs, mious, marker="o", label="student")
    if teacher_miou is not None:
        ax.axhline(teacher_miou, color="tab:red", ls="--", label="teacher (greedy)")
    ax.set_xticks(xs)
    ax.set_xlabel("round")
    ax.set_ylabel("held-out mIoU")
    ax.set_ylim(0, 1.02)
    ax.legend()
    _save(fig, path, config_hash)
