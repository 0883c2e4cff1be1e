"""Matplotlib rendering for report rows, written next to the JSON-lines output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_speed_scatter(rows: list[dict], path: str | Path, title: str = "speed vs perplexity") -> Path:
    """Tokens/s against perplexity, one annotated point per model label."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for row in rows:
        ax.scatter(row["tokens_per_s"], row["perplexity"], s=36)
        ax.annotate(
            row["label"],
            (row["tokens_per_s"], row["perplexity"]),
            textcoords="offset points",
            xytext=(5, 4),
            fontsize=8,
        )
    ax.set_xlabel("tokens/s")
    ax.set_ylabel("perplexity")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path


def render_lambda_grid(grid: list[tuple[float, float]], lam_star: float, path: str | Path) -> Path:
    """Validation perplexity across the interpolation-weight grid."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    xs = [g[0] for g in grid]
    ys = [g[1] for g in grid]
    ax.plot(xs, ys, marker="o", ms=3)
    ax.axvline(lam_star, color="tab:red", ls="--", lw=1, label=f"selected {lam_star:.2f}")
    ax.set_xlabel("interpolation weight")
    ax.set_ylabel("validation perplexity")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path


def render_ablation(rows: list[dict], path: str | Path) -> Path:
    """Perplexity vs skip fraction, one line per (mask, weight) cell.

    Random-mask cells with several seeds are averaged per fraction.
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    cells = sorted({(r["mask"], r["weight"]) for r in rows})
    for mask, weight in cells:
        sub = [r for r in rows if r["mask"] == mask and r["weight"] == weight]
        fractions = sorted({r["fraction"] for r in sub})
        ys = []
        for f in fractions:
            vals = [r["perplexity"] for r in sub if r["fraction"] == f]
            ys.append(sum(vals) / len(vals))
        ax.plot(fractions, ys, marker="o", ms=3, label=f"{mask} mask, {weight} weight")
    ax.set_xlabel("fraction of retrievals skipped")
    ax.set_ylabel("perplexity")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=140)
    plt.close(fig)
    return path
