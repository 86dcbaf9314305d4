"""Report figures written next to the CLI's CSV/JSON outputs.

Everything renders through the Agg backend to PNG; no display is touched.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}

PNG_META = {"Software": None}  # keeps reruns byte-identical across matplotlib builds


def figure_path(out: str | Path, tag: str) -> Path:
    """``results.csv`` + ``scaling`` -> ``results.scaling.png``."""
    out = Path(out)
    return out.with_name(f"{out.stem}.{tag}.png")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_scaling(rows: list[dict], path: Path, metric: str = "entries") -> Path:
    """Log-log cost curves per attention mode against the condition count."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode in sorted({r["mode"] for r in rows}):
            pts = sorted((r["c"], r[metric]) for r in rows if r["mode"] == mode)
            ax.loglog([p[0] for p in pts], [p[1] for p in pts], "o-", label=mode, base=2)
        ax.set_xlabel("conditions c")
        ax.set_ylabel(metric)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_trace(trace: list[dict], path: Path, label: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        its = [r["iteration"] for r in trace]
        ax.semilogy(its, [r["loss"] for r in trace], lw=0.6, alpha=0.6, label="train loss")
        ev = [r for r in trace if r.get("eval_loss") is not None]
        if ev:
            ax.semilogy([r["iteration"] for r in ev], [r["eval_loss"] for r in ev], "o-", label="eval loss")
            ax.semilogy([r["iteration"] for r in ev], [r["cond_mse"] for r in ev], "s-", label="condition MSE")
        ax.set_xlabel("iteration")
        ax.set_title(label)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_timesteps(samples: np.ndarray, path: Path, pdf=None, label: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(samples, bins=100, range=(0, 1), density=True, alpha=0.6, label="samples")
        if pdf is not None:
            grid = np.linspace(0.001, 0.999, 400)
            ax.plot(grid, pdf(grid), "k-", lw=1, label="density")
        ax.set_xlabel("t (1 = noise)")
        ax.set_title(label)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_band_mass(radii, mass, baseline, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(radii, mass, "o-", label="attention")
        ax.plot(radii, baseline, "--", color="grey", label="uniform")
        ax.set_xlabel("Chebyshev radius")
        ax.set_ylabel("mass within radius")
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_grids(images: np.ndarray, grid: tuple[int, int], path: Path, titles=None) -> Path:
    """First channel of each ``(N, ch)`` image as a heatmap row."""
    images = np.asarray(images)
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n, figsize=(1.4 * n, 1.6), squeeze=False)
        for i, ax in enumerate(axes[0]):
            ax.imshow(images[i][:, 0].reshape(grid), vmin=-1, vmax=1, cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
            if titles:
                ax.set_title(titles[i], fontsize=7)
        return _save(fig, path)
