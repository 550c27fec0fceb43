"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .design import SCENARIO_IDS  # noqa: E402
from .estimation import COEF_NAMES, PosteriorSummary  # noqa: E402
from .reporting import PERSONA_LABEL, CellStats, _persona_rank  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "bkf",
}
# PNG metadata carries the matplotlib version by default; drop it so reruns are byte-identical
_SAVE_KW = {"dpi": 150, "metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_scenario_means(stats: Sequence[CellStats], path: str | Path) -> Path:
    """Grouped scenario means with +/- 1 sd bars, one series per model x persona."""
    series = sorted({(c.model_id, c.persona) for c in stats},
                    key=lambda k: (k[0], _persona_rank(k[1]), k[1]))
    index = {(c.model_id, c.persona, c.scenario_id): c for c in stats}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        width = 0.8 / max(len(series), 1)
        for j, (model, persona) in enumerate(series):
            xs, means, sds = [], [], []
            for i, sid in enumerate(SCENARIO_IDS):
                cell = index.get((model, persona, sid))
                if cell is not None:
                    xs.append(i - 0.4 + width * (j + 0.5))
                    means.append(cell.mean)
                    sds.append(cell.sd)
            ax.errorbar(xs, means, yerr=sds, fmt="o", capsize=3, ms=4,
                        label=f"{model} {PERSONA_LABEL.get(persona, persona)}")
        ax.axhline(0.0, color="0.7", lw=0.6)
        ax.set_xticks(range(len(SCENARIO_IDS)), SCENARIO_IDS)
        ax.set_xlabel("Scenario")
        ax.set_ylabel("Updated expectation (%)")
        if series:
            ax.legend(frameon=False, ncol=2)
        fig.tight_layout()
    return _save(fig, Path(path))


def plot_forest(summaries: Mapping[tuple[str, str], PosteriorSummary], path: str | Path) -> Path:
    """Posterior means and 95% HDIs, one panel per coefficient."""
    keys = sorted(summaries, key=lambda k: (_persona_rank(k[0]), k))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(COEF_NAMES), figsize=(8.0, 0.5 + 0.35 * max(len(keys), 2)),
                                 sharey=True)
        labels = [f"{PERSONA_LABEL.get(p, p)} {m}" for p, m in keys]
        for ax, name in zip(axes, COEF_NAMES):
            for y, key in enumerate(keys):
                c = summaries[key].coef(name)
                ax.plot([c.hdi_low, c.hdi_high], [y, y], color="0.3", lw=1.2)
                ax.plot([c.mean], [y], "o", color="C0", ms=4)
            ax.set_title(name)
            if name == "beta_int":
                ax.axvline(0.0, color="C3", lw=0.8, ls="--")
        axes[0].set_yticks(range(len(keys)), labels)
        axes[0].invert_yaxis()
        fig.tight_layout()
    return _save(fig, Path(path))
