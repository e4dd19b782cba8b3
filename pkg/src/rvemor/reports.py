"""Figure rendering for the report-producing commands.

Every function writes a PNG next to the delimited output and returns the
path; nothing is shown interactively (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_stress_traces",
    "save_coefficient_traces",
    "save_lambda_maps",
    "save_loss_curve",
    "save_spectrum",
    "save_residual_curve",
    "save_sweep_bubbles",
]

_STYLE = {"dns": dict(linestyle="-", color="k", linewidth=1.4),
          "mor": dict(linestyle="--", color="tab:blue", linewidth=1.4),
          "rnn": dict(linestyle=":", color="tab:red", linewidth=1.8)}
_COMPONENTS = (("P11", 0, 0), ("P22", 1, 1), ("P12", 0, 1), ("P21", 1, 0))


def _style(label: str) -> dict:
    for key, st in _STYLE.items():
        if label.startswith(key):
            return st
    return dict(linestyle="-", linewidth=1.0)


def save_stress_traces(path, runs, title: str = "") -> str:
    """2x2 grid of homogenized stress components over the load path."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 6), sharex=True)
    for (name, i, j), ax in zip(_COMPONENTS, axes.ravel()):
        for run in runs:
            inc = np.arange(1, run.P_macro.shape[0] + 1)
            ax.plot(inc, run.P_macro[:, i, j], label=run.label,
                    **_style(run.label))
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("increment")
    axes[0, 0].legend(loc="best", fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def save_coefficient_traces(path, runs, n_show: int = 6,
                            title: str = "") -> str:
    """First few reduced coefficients per increment; the first run draws
    lines, later runs draw sparse crosses on top."""
    runs = [r for r in runs if r.alphas is not None]
    if not runs:
        raise ValueError("no runs with coefficients to plot")
    n_show = min(n_show, runs[0].alphas.shape[1])
    fig, ax = plt.subplots(figsize=(9, 5))
    colors = plt.cm.tab10(np.linspace(0, 1, 10))
    for r, run in enumerate(runs):
        inc = np.arange(1, run.alphas.shape[0] + 1)
        stride = max(1, len(inc) // 40)
        for c in range(n_show):
            kw = dict(color=colors[c % 10])
            if r == 0:
                ax.plot(inc, run.alphas[:, c],
                        label=f"{run.label} a{c + 1}", linewidth=1.2, **kw)
            else:
                ax.plot(inc[::stride], run.alphas[::stride, c], "x",
                        markersize=4, label=f"{run.label} a{c + 1}"
                        if c == 0 else None, **kw)
    ax.set_xlabel("increment")
    ax.set_ylabel("coefficient")
    ax.grid(alpha=0.3)
    ax.legend(loc="best", fontsize=7, ncol=2)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def _element_field(values: np.ndarray, grid_n: int) -> np.ndarray:
    """Per-element mean of a per-quadrature-point field, as an n x n image
    (row 0 at the bottom of the cell)."""
    per_el = np.asarray(values, float).reshape(-1, 4).mean(axis=1)
    return per_el.reshape(grid_n, grid_n)


def save_lambda_maps(path, grid_n: int, fields: dict, title: str = "") -> str:
    """One heat map per labelled per-quadrature-point field."""
    n = len(fields)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 3.6), squeeze=False)
    for ax, (label, values) in zip(axes[0], fields.items()):
        img = _element_field(values, grid_n)
        im = ax.imshow(img, origin="lower", cmap="viridis",
                       extent=(0, 1, 0, 1))
        ax.set_title(label, fontsize=9)
        fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def save_loss_curve(path, history, title: str = "") -> str:
    epochs = np.array([h.epoch for h in history])
    train = np.array([h.train_loss for h in history])
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.semilogy(epochs, train, color="tab:blue", linewidth=1.0,
                label="training")
    val = [(h.epoch, h.val_loss) for h in history if h.val_loss is not None]
    if val:
        ve, vl = zip(*val)
        ax.semilogy(ve, vl, "o-", color="tab:orange", markersize=3,
                    linewidth=1.0, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("coefficient MSE")
    ax.grid(alpha=0.3, which="both")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def save_spectrum(path, sigma, n_b: int | None = None,
                  title: str = "") -> str:
    sigma = np.asarray(sigma, float)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    idx = np.arange(1, sigma.size + 1)
    positive = sigma > 0
    ax.semilogy(idx[positive], sigma[positive], "o-", markersize=3,
                linewidth=1.0)
    if n_b is not None:
        ax.axvline(n_b + 0.5, color="tab:red", linestyle="--",
                   label=f"kept {n_b}")
        ax.legend(loc="best")
    ax.set_xlabel("mode")
    ax.set_ylabel("singular value")
    ax.grid(alpha=0.3, which="both")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def save_residual_curve(path, residual, title: str = "") -> str:
    residual = np.asarray(residual, float)
    fig, ax = plt.subplots(figsize=(8, 4))
    floor = np.maximum(residual, 1e-300)
    ax.semilogy(np.arange(1, residual.size + 1), floor, color="tab:green",
                linewidth=1.0)
    ax.set_xlabel("increment")
    ax.set_ylabel("projected residual (relative)")
    ax.grid(alpha=0.3, which="both")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)


def save_sweep_bubbles(path, rows, title: str = "") -> str:
    """Terminal loss per architecture: bubble area tracks parameter count,
    color tracks the input width."""
    ok = [r for r in rows if not r.error and np.isfinite(r.train_loss)]
    fig, ax = plt.subplots(figsize=(8, 5))
    if ok:
        d_h = np.array([r.d_h for r in ok], float)
        loss = np.array([max(r.train_loss, 1e-300) for r in ok])
        size = np.array([r.n_params for r in ok], float)
        size = 40.0 + 260.0 * size / size.max()
        d_in = np.array([r.d_in for r in ok], float)
        sc = ax.scatter(d_h, loss, s=size, c=d_in, cmap="viridis",
                        alpha=0.75, edgecolors="k", linewidths=0.5)
        fig.colorbar(sc, ax=ax, label="input width")
        ax.set_yscale("log")
    ax.set_xlabel("hidden variables")
    ax.set_ylabel("terminal training MSE")
    ax.grid(alpha=0.3, which="both")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return str(path)
