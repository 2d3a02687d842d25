"""Figures for run reports (matplotlib, file output only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_paths(bundle, path: str | Path, n_show: int = 30) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    t = bundle.times
    X = bundle.state[:n_show, :, 0]
    for i in range(X.shape[0]):
        k = int(bundle.stop_index[i])
        ax.plot(t[: k + 1], X[i, : k + 1], lw=0.7)
        ax.plot(t[k], X[i, k], "k.", ms=3)
    ax.set_xlabel("t")
    ax.set_ylabel("X")
    ax.set_title(f"{X.shape[0]} sample paths (dots: stopping)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_surface(rows: list[dict], path: str | Path, n_slices: int = 5, title: str = "value") -> Path:
    """Value against state at a few time slices, from ``io.surface_rows`` output."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    times = sorted({r["t"] for r in rows})
    picks = [times[i] for i in np.linspace(0, len(times) - 1, min(n_slices, len(times))).astype(int)]
    for t in dict.fromkeys(picks):
        sel = [r for r in rows if r["t"] == t and r["occupancy"] >= 1e-3]
        if sel:
            ax.plot([r["x"] for r in sel], [r["value"] for r in sel], marker=".", label=f"t={t:.3g}")
    ax.set_xlabel("x")
    ax.set_ylabel(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_sweep(sweep, path: str | Path) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.asarray(sweep.values, dtype=float)
    y = np.asarray(sweep.se if sweep.axis == "n_paths" else sweep.errors, dtype=float)
    ok = np.isfinite(y) & (y > 0)
    ax.loglog(x[ok], y[ok], "o-")
    ax.set_xlabel(sweep.axis)
    ax.set_ylabel("standard error" if sweep.axis == "n_paths" else "error")
    if sweep.order is not None:
        ax.set_title(f"fitted order {sweep.order:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_obstacle(sol, path: str | Path) -> Path:
    """Y and S along the first few paths, marking steps where the reflection acts."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 4))
    t = sol.bundle.times
    dK = np.diff(sol.K, axis=1)
    for i in range(min(5, sol.Y.shape[0])):
        k = int(sol.bundle.stop_index[i])
        line, = ax.plot(t[: k + 1], sol.Y[i, : k + 1], lw=0.8)
        S = sol.S[i, : k + 1] if sol.S is not None else None
        if S is not None and np.isfinite(S).any():
            ax.plot(t[: k + 1], np.where(np.isfinite(S), S, np.nan), ls="--", lw=0.6, color=line.get_color())
        push = np.flatnonzero(dK[i, :k] > 0)
        ax.plot(t[push], sol.Y[i, push], "x", ms=3, color=line.get_color())
    ax.set_xlabel("t")
    ax.set_ylabel("Y (solid), S (dashed)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
