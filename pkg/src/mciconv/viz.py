"""2-d projection of embeddings, KDE panels and static figure output."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402

# (file stem, group A, group B); groups name values of the "group" column
KDE_PANELS = (
    ("kde_nc_ad", "NC", "AD"),
    ("kde_smci_cmci", "sMCI", "cMCI"),
    ("kde_mci_ad", "MCI", "AD"),
)
COLORS = {"NC": "tab:green", "MCI": "tab:orange", "AD": "tab:red", "sMCI": "tab:blue", "cMCI": "tab:purple"}


class VizError(ValueError):
    pass


def project_2d(embeddings, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    """t-SNE to two dimensions with PCA initialisation (identical inputs stay together)."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 5:
        raise VizError(f"need at least 5 points, got shape {x.shape}")
    perplexity = min(perplexity, (len(x) - 1) / 3.0)
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed, n_jobs=1)
    return tsne.fit_transform(x)


def density_grid(points, n: int = 80, pad: float = 3.0, bandwidth=None) -> tuple[np.ndarray, np.ndarray]:
    """Grid spanning the points plus ``pad`` kernel widths on each side."""
    pts = np.asarray(points, dtype=float)
    kde = _kde(pts, bandwidth)
    sd = np.sqrt(np.diag(kde.covariance))
    lo, hi = pts.min(axis=0) - pad * sd, pts.max(axis=0) + pad * sd
    return np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)


def _kde(pts: np.ndarray, bandwidth=None) -> gaussian_kde:
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise VizError(f"need at least 2 two-dimensional points, got shape {pts.shape}")
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred, tol=1e-12) < 2:
        raise VizError("degenerate point set (identical or collinear points); add jitter")
    return gaussian_kde(pts.T, bw_method=bandwidth or "scott")


def kde_density(points, grid: tuple[np.ndarray, np.ndarray] | None = None, bandwidth=None) -> np.ndarray:
    """Gaussian KDE evaluated on the meshgrid of ``grid`` (xs, ys); shape (len(ys), len(xs))."""
    pts = np.asarray(points, dtype=float)
    kde = _kde(pts, bandwidth)
    xs, ys = grid if grid is not None else density_grid(pts, bandwidth=bandwidth)
    gx, gy = np.meshgrid(xs, ys)
    dens = kde(np.vstack([gx.ravel(), gy.ravel()])).reshape(gx.shape)
    return np.clip(dens, 0.0, None)


def riemann_sum(density: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> float:
    return float(density.sum() * (xs[1] - xs[0]) * (ys[1] - ys[0]))


def density_mode(density: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    iy, ix = np.unravel_index(np.argmax(density), density.shape)
    return float(xs[ix]), float(ys[iy])


def render_figures(
    coords,
    diagnosis: Sequence[str],
    groups: Sequence[str],
    out_dir: str | Path,
    bandwidth=None,
) -> dict[str, Path]:
    """Write the cluster scatter and three pairwise KDE overlays, each with its data CSV.

    ``diagnosis`` is NC/MCI/AD per point; ``groups`` refines MCI into
    sMCI/cMCI where known (other points repeat their diagnosis).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise VizError(f"cannot create output directory {out}: {err}") from err
    coords = np.asarray(coords, dtype=float)
    df = pd.DataFrame({"x": coords[:, 0], "y": coords[:, 1], "diagnosis": list(diagnosis), "group": list(groups)})
    files: dict[str, Path] = {}

    fig, ax = plt.subplots(figsize=(5, 5))
    for dx in ("NC", "MCI", "AD"):
        sub = df[df["diagnosis"] == dx]
        if len(sub):
            ax.scatter(sub["x"], sub["y"], s=10, c=COLORS[dx], label=dx, alpha=0.8)
    ax.set_title("Embedded clusters")
    ax.legend()
    files["clusters"] = _save(fig, out / "clusters.png")
    df.to_csv(out / "clusters.csv", index=False)

    pooled = df[["x", "y"]].to_numpy()
    xs, ys = density_grid(pooled, bandwidth=bandwidth)
    for stem, a, b in KDE_PANELS:
        fig, ax = plt.subplots(figsize=(5, 5))
        table = {"x": np.repeat(xs[None, :], len(ys), 0).ravel(), "y": np.repeat(ys[:, None], len(xs), 1).ravel()}
        for name in (a, b):
            pts = _points_for(df, name)
            try:
                dens = kde_density(pts, (xs, ys), bandwidth)
            except VizError:
                dens = np.zeros((len(ys), len(xs)))
            table[f"density_{name}"] = dens.ravel()
            ax.contour(xs, ys, dens, colors=COLORS[name], levels=6)
            ax.plot([], [], c=COLORS[name], label=f"{name} (n={len(pts)})")
        ax.set_title(f"{a} / {b} density")
        ax.legend()
        files[stem] = _save(fig, out / f"{stem}.png")
        pd.DataFrame(table).to_csv(out / f"{stem}.csv", index=False)
    return files


def _points_for(df: pd.DataFrame, name: str) -> np.ndarray:
    col = "diagnosis" if name in ("NC", "MCI", "AD") else "group"
    return df.loc[df[col] == name, ["x", "y"]].to_numpy()


def _save(fig, path: Path) -> Path:
    # fixed metadata so PNG bytes do not depend on the matplotlib build date
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
