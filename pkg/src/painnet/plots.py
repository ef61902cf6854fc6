"""Figures written next to the delimited report files."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def plot_mae_per_intensity(per_level, path, macro: float | None = None, label: str = "PainNet"):
    per = np.asarray(per_level, dtype=float)
    levels = np.arange(per.size)
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ok = ~np.isnan(per)
    ax.bar(levels[ok], per[ok], color="#4c72b0", width=0.7, label=label)
    if macro is not None and not math.isnan(macro):
        ax.axhline(macro, color="#c44e52", lw=1.0, ls="--", label=f"mean {macro:.2f}")
    ax.set_xticks(levels)
    ax.set_xlabel("VAS intensity")
    ax.set_ylabel("MAE")
    ax.set_xlim(-0.6, per.size - 0.4)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path
