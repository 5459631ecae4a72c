"""Static report figures."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def plot_asr_curve(rows: list[dict], path: Path) -> None:
    """Victim-side ASR against the first IC position, one dot per seed and the seed mean."""
    nvs = sorted({r["n_v"] for r in rows})
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for r in rows:
        ax.scatter(r["n_v"], 100 * r["asr"], color="0.6", s=12, zorder=2)
    means = [100 * np.mean([r["asr"] for r in rows if r["n_v"] == nv]) for nv in nvs]
    ax.plot(nvs, means, marker="o", color="C3", label="mean over seeds", zorder=3)
    ax.set_xlabel("first victim IC block $N_v$")
    ax.set_ylabel("ASR (%)")
    ax.set_ylim(0, 102)
    ax.set_xticks(nvs)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_entropy_histograms(entropies: dict[str, dict], path: Path) -> None:
    """One panel per model: clean versus triggered STRIP entropy."""
    names = list(entropies)
    fig, axes = plt.subplots(1, len(names), figsize=(3.6 * len(names), 3.0), squeeze=False)
    for ax, name in zip(axes[0], names):
        e = entropies[name]
        hi = max(float(np.max(e["clean"])), float(np.max(e["triggered"])), 1e-3)
        bins = np.linspace(0.0, hi, 30)
        ax.hist(e["clean"], bins=bins, alpha=0.6, density=True, label="clean")
        ax.hist(e["triggered"], bins=bins, alpha=0.6, density=True, label="triggered")
        ax.set_title(name)
        ax.set_xlabel("entropy (bits)")
    axes[0][0].set_ylabel("density")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
