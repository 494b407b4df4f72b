"""Figure and plot-data emission for bench and phi-suite reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# keep PNGs free of version/date metadata so reruns produce identical files
PNG_METADATA = {"Software": None}


def write_columns(path, x, y, header=("x", "y")):
    """Plain two-column whitespace-separated data file."""
    with open(path, "w") as fh:
        fh.write(f"# {header[0]} {header[1]}\n")
        for a, b in zip(x, y):
            fh.write(f"{a!r} {b!r}\n")


def thin(n, limit=2000):
    """Indices of at most ``limit`` points spread over ``n``, keeping both ends."""
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(int))


def loss_curves(curves, path, title=None, reference=None):
    """``curves`` maps label -> loss array indexed by step."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for label, ys in curves.items():
        ys = np.asarray(ys, dtype=float)
        idx = thin(ys.size)
        ax.plot(idx, ys[idx], label=label, lw=1.2)
    if reference:
        for label, value in reference.items():
            ax.axhline(value, ls="--", lw=0.9, color="gray")
            ax.annotate(label, (0, value), fontsize=8, color="gray", va="bottom")
    ax.set_xscale("symlog", linthresh=10)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("weighted loss")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)


def phi_vs_drop(rows, path):
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    phi = np.array([r["phi"] for r in rows])
    drop = np.array([r["svd_accuracy_drop"] for r in rows])
    levels = np.array([r["heterogeneity"] for r in rows])
    pts = ax.scatter(phi, drop, c=levels, cmap="viridis", s=24)
    fig.colorbar(pts, ax=ax, label="heterogeneity")
    ax.set_xlabel("phi of Fisher importance")
    ax.set_ylabel("accuracy drop after SVD")
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=PNG_METADATA)
    plt.close(fig)
