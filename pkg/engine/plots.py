"""File-only figures: layer statistics, training trends and slide visualizations."""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

BRANCH_COLORS = {"x1": "tab:red", "x2": "tab:orange", "x3": "tab:blue"}


def _save(fig, out_path):
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    fig.savefig(out_path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    return out_path


def plot_gap_stats(stats, profiles, out_path):
    """Per-layer activation mean and variance of the frozen meta-branch for X1/X2/X3."""
    fig, axes = plt.subplots(1, 2, figsize=(11.0, 4.2), dpi=150)
    gap_layers = sorted(set().union(*(p.gap_layers for p in profiles.values())))
    for ax, key, title in ((axes[0], "mean", "activation mean"), (axes[1], "variance", "activation variance")):
        for branch, rows in stats.items():
            layers = [r["layer"] for r in rows]
            ax.plot(layers, [r[key] for r in rows], marker="o", color=BRANCH_COLORS.get(branch), label=branch.upper())
        for layer in gap_layers:
            ax.axvspan(layer - 0.4, layer + 0.4, color="0.85", zorder=0)
        ax.set_xlabel("layer")
        ax.set_title(title)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.suptitle("meta-branch statistics (shaded: gap layers)")
    return _save(fig, out_path)


def _plot_heads(ax, log, label, style="-"):
    for head in log.heads():
        losses = log.losses(head)
        ax.plot(range(1, len(losses) + 1), losses, style, marker=".", label=f"{label} {head}")


def plot_train_trend(logs, out_path):
    fig, ax = plt.subplots(figsize=(7.0, 4.2), dpi=150)
    for label, log in logs.items():
        _plot_heads(ax, log, label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training loss per head")
    ax.grid(alpha=0.3)
    ax.legend(fontsize="small")
    return _save(fig, out_path)


def plot_fusion_trend(logs, out_path):
    """Meta fusion against the directly trained fusion convolutions."""
    fig, ax = plt.subplots(figsize=(7.0, 4.2), dpi=150)
    for style, (label, log) in zip(("-", "--"), logs.items()):
        losses = log.losses("S")
        ax.plot(range(1, len(losses) + 1), losses, style, marker="o", label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("sub-training loss L(S, Y1)")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, out_path)


def plot_branch_trend(logs, out_path):
    fig, axes = plt.subplots(1, 2, figsize=(11.0, 4.2), dpi=150, sharey=True)
    for ax, head in zip(axes, ("S1", "S2")):
        for style, (label, log) in zip(("-", "--"), logs.items()):
            losses = log.losses(head)
            ax.plot(range(1, len(losses) + 1), losses, style, marker="o", label=label)
        ax.set_title(head)
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("loss")
    axes[0].legend()
    return _save(fig, out_path)


def label_colormap(n_classes):
    colors = plt.get_cmap("tab10")(np.arange(n_classes) % 10)
    return ListedColormap(colors)


def plot_visual(image, truth, maps, n_classes, out_path):
    """Image, ground truth and each stitched prediction side by side."""
    panels = [("image", image), ("truth", truth)] + [(key, value) for key, value in maps.items()]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4), dpi=150)
    cmap = label_colormap(n_classes)
    for ax, (title, data) in zip(axes, panels):
        if title == "image":
            ax.imshow(np.clip(data, 0.0, 1.0))
        else:
            shown = np.ma.masked_where(np.asarray(data) >= n_classes, data)
            ax.imshow(shown, cmap=cmap, vmin=0, vmax=n_classes - 1, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    return _save(fig, out_path)
