"""Figure rendering for the evaluation report path."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (7.0, 4.2),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def save_summary_figure(aggregates, path) -> None:
    """Grouped bars of per-case mean accuracy and F1, plus the overall average."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        case_ids = sorted({c.case_id for a in aggregates for c in a.cases})
        labels = case_ids + ["Average"]
        xs = list(range(len(labels)))
        n_series = 2 * len(aggregates)
        width = 0.8 / n_series
        series = 0
        for agg in aggregates:
            by_case = {c.case_id: c for c in agg.cases}
            for metric in ("ACC", "F1"):
                vals = [getattr(by_case[c], "accuracy" if metric == "ACC" else "f1")
                        if c in by_case else 0.0 for c in case_ids]
                vals.append(agg.accuracy if metric == "ACC" else agg.f1)
                offset = (series - (n_series - 1) / 2) * width
                ax.bar([x + offset for x in xs], vals, width,
                       label=f"{agg.model_id} {metric}")
                series += 1
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, rotation=20, ha="right")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("score")
        ax.set_title("Mean test metrics per case")
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def save_training_curves_figure(case_id, runs, path) -> None:
    """Loss and validation-F1 curves for every seed of one case.

    runs is a list of (seed, history) pairs where history rows carry
    train_loss and val_f1 per epoch.
    """
    with plt.rc_context(_STYLE):
        fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        for seed, history in runs:
            epochs = [r.epoch for r in history]
            ax_loss.plot(epochs, [r.train_loss for r in history], label=f"seed {seed}")
            ax_f1.plot(epochs, [r.val_f1 for r in history], label=f"seed {seed}")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_f1.set_xlabel("epoch")
        ax_f1.set_ylabel("validation F1")
        ax_f1.set_ylim(0.0, 1.05)
        if len(runs) <= 10:
            ax_f1.legend(fontsize=7)
        fig.suptitle(f"Training runs for {case_id}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
