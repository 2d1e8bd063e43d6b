"""Static figures for solver runs and reconstructions (Agg backend, PNG)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scene.export import atomic_write_bytes  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path):
    import io

    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_convergence(runs: dict, path) -> None:
    """Ray chi2, pixel chi2 and cond(H_FF) per iteration for each labelled run."""
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.8))
    for label, records in runs.items():
        it = [r.iter for r in records]
        for ax, key in zip(axes, ("chi2_ray", "chi2_uv", "cond_HFF")):
            y = np.array([getattr(r, key) for r in records], float)
            y = np.where(np.isfinite(y) & (y > 0), y, np.nan)
            ax.semilogy(it, y, marker="o", ms=3, label=label)
    for ax, title in zip(axes, ("ray chi2", "pixel chi2", "cond(H_FF)")):
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ax.grid(True, which="both", alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_geometry(p, X, path, tags=None, truth_p=None, truth_X=None, far_limit=None) -> None:
    """Top view (x-z plane) of camera centres and points."""
    fig, ax = plt.subplots(figsize=(6, 6))
    X = np.asarray(X, float).reshape(-1, 3)
    if far_limit is not None and len(X):
        # distant points would squash the plot; keep them out of view
        near = np.linalg.norm(X - np.mean(p, axis=0), axis=1) <= far_limit
    else:
        near = np.ones(len(X), bool)
    tags = np.asarray(tags if tags is not None else ["normal"] * len(X))
    for tag, style in (("normal", "k."), ("far", "b^"), ("collinear", "rs")):
        sel = near & (tags == tag)
        if sel.any():
            ax.plot(X[sel, 0], X[sel, 2], style, ms=4, label=f"{tag} points")
    if truth_X is not None:
        T = np.asarray(truth_X)[near]
        ax.plot(T[:, 0], T[:, 2], "o", mfc="none", mec="0.6", ms=6, label="truth points")
    ax.plot(p[:, 0], p[:, 2], "g-o", ms=5, label="cameras")
    if truth_p is not None:
        ax.plot(truth_p[:, 0], truth_p[:, 2], "o", mfc="none", mec="g", ms=9, label="truth cameras")
    ax.set_xlabel("x")
    ax.set_ylabel("z")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
