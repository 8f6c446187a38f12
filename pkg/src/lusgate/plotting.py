"""Report figures, rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import RocCurve, VariantSummary  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.dpi": 100,
}
# PNG metadata carries the matplotlib version by default; drop it for byte-stable files
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_roc(curves: Mapping[str, RocCurve], path, title: str = "Diagnosis ROC") -> Path:
    """One staircase per labelled curve, with AUC in the legend."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
        for name, roc in curves.items():
            ax.step(roc.fp_rate, roc.tp_rate, where="post", lw=1.2, label=f"{name} (AUC {roc.auc:.3f})")
        ax.set_xlim(-0.01, 1.01)
        ax.set_ylim(-0.01, 1.01)
        ax.set_xlabel("1 - specificity")
        ax.set_ylabel("sensitivity")
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def plot_accuracy(rows: Sequence[VariantSummary], path) -> Path:
    """Grouped bars: QA accuracy, gated and ungated diagnosis accuracy per variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        series = (("QA", [r.qa_accuracy for r in rows]),
                  ("diagnosis, gated", [r.diag_accuracy for r in rows]),
                  ("diagnosis, ungated", [r.ungated_accuracy for r in rows]))
        width = 0.26
        for k, (label, values) in enumerate(series):
            xs = [i + (k - 1) * width for i in range(len(rows))]
            ax.bar(xs, values, width, label=label)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([f"QA^{r.variant}" for r in rows])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("accuracy")
        ax.legend(loc="lower center", bbox_to_anchor=(0.5, 1.0), ncol=3, fontsize=7)
        fig.tight_layout()
        return _save(fig, path)
