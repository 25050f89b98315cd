"""Exact t-SNE and Isomap for 2-D/3-D views of flattened image sets."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import DegenerateRow, NaNInput, NonSymmetric
from .linalg import top_eigenpairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    output_dim: int = 2
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    adaptive_gains: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.output_dim not in (2, 3):
            raise ValueError("output_dim must be 2 or 3")
        if self.iterations < self.exaggeration_iters:
            raise ValueError("iterations must cover the early-exaggeration phase")
        if self.perplexity < 1:
            raise ValueError("perplexity must be >= 1")


@dataclass(frozen=True)
class IsomapConfig:
    k_neighbors: int = 10
    output_dim: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.output_dim not in (2, 3):
            raise ValueError("output_dim must be 2 or 3")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


@dataclass
class Embedding:
    """Low-dimensional coordinates for the points listed in ``indices``.

    ``dropped`` holds input indices that could not be embedded (Isomap points
    outside the largest connected component).
    """

    coordinates: np.ndarray
    labels: Optional[np.ndarray]
    method: str
    diagnostic: float
    diagnostic_name: str
    indices: np.ndarray
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    history: list = field(default_factory=list)


def pairwise_sq_dists(points) -> np.ndarray:
    """Symmetric matrix of squared Euclidean distances with an exact zero diagonal."""
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0)
    g = x @ x.T
    sq = np.diag(g)
    d = sq[:, None] + sq[None, :] - 2.0 * g
    np.maximum(d, 0.0, out=d)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


# -- t-SNE -------------------------------------------------------------------

def _row_entropy(d, beta):
    """Conditional probabilities and their Shannon entropy in bits."""
    p = np.exp(-beta * d)
    total = p.sum()
    h = np.log(total) + beta * np.dot(d, p) / total
    return p / total, h / np.log(2.0)


def calibrate_precision(sq_dists_row, target_perplexity: float, tol: float = 1e-4,
                        max_steps: int = 64) -> float:
    """Bisect the kernel precision beta so the row's perplexity hits the target.

    The search starts from 1 / mean(shifted distance), so scaling all distances by
    c**2 scales the returned beta by 1 / c**2.
    """
    if target_perplexity < 1:
        raise ValueError("target perplexity must be >= 1")
    row = np.asarray(sq_dists_row, dtype=np.float64)
    if row.size == 0 or not np.any(row):
        raise DegenerateRow("all distances are zero")
    d = row - row.min()
    mean = d.mean()
    beta = 1.0 / mean if mean > 0 else 1.0
    lo, hi = 0.0, np.inf
    for _ in range(max_steps):
        _, h = _row_entropy(d, beta)
        perp = 2.0 ** h
        if abs(perp - target_perplexity) <= tol * target_perplexity:
            break
        if perp > target_perplexity:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
        else:
            hi = beta
            beta = 0.5 * (beta + lo)
    return beta


def conditional_p(sq_dists, perplexity: float) -> np.ndarray:
    """Row-stochastic matrix of p_{j|i}, each row calibrated to ``perplexity``."""
    n = len(sq_dists)
    out = np.zeros((n, n))
    for i in range(n):
        row = np.delete(sq_dists[i], i)
        beta = calibrate_precision(row, perplexity)
        p, _ = _row_entropy(row - row.min(), beta)
        out[i, np.arange(n) != i] = p
    return out


def joint_p(sq_dists, perplexity: float) -> np.ndarray:
    """Symmetrised affinities (p_{j|i} + p_{i|j}) / 2n, floored and renormalised."""
    n = len(sq_dists)
    cond = conditional_p(sq_dists, perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)
    return p / p.sum()


def tsne(points, cfg: TsneConfig = TsneConfig(), labels=None) -> Embedding:
    """Exact-gradient t-SNE: early exaggeration, then momentum gradient descent.

    ``cfg.adaptive_gains`` enables delta-bar-delta per-coordinate step gains.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("t-SNE needs at least two points")
    if cfg.perplexity >= n:
        raise ValueError(f"perplexity {cfg.perplexity} too large for {n} points")
    p = joint_p(pairwise_sq_dists(x), cfg.perplexity)
    p_log_p = float(np.sum(p[p > 0] * np.log(p[p > 0])))

    rng = np.random.default_rng(cfg.seed)
    y = rng.normal(0.0, 1e-4, size=(n, cfg.output_dim))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(cfg.iterations):
        exag = cfg.early_exaggeration if it < cfg.exaggeration_iters else 1.0
        mom = cfg.momentum if it < cfg.momentum_switch else cfg.final_momentum
        num = 1.0 / (1.0 + pairwise_sq_dists(y))
        np.fill_diagonal(num, 0.0)
        z = num.sum()
        q = np.maximum(num / z, 1e-12)
        w = (exag * p - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)

        if cfg.adaptive_gains:
            same = (grad > 0) == (update > 0)
            gains = np.where(same, gains * 0.8, gains + 0.2)
            np.maximum(gains, 0.01, out=gains)
        update = mom * update - cfg.learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)

        # KL(P || Q) of the un-exaggerated objective at the pre-step layout; diag(P) is 0
        history.append(p_log_p - float(np.sum(p * np.log(q))))
    num = 1.0 / (1.0 + pairwise_sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    kl = p_log_p - float(np.sum(p * np.log(q)))
    if not np.all(np.isfinite(y)):
        raise NaNInput("t-SNE diverged")
    return Embedding(y, None if labels is None else np.asarray(labels), "tsne", kl, "kl",
                     np.arange(n), history=history)


# -- Isomap ------------------------------------------------------------------

def knn_graph(points, k: int, sq_dists=None) -> sp.csr_array:
    """Symmetrised k-nearest-neighbour graph weighted by Euclidean distance.

    Neighbour ties go to the lower index. Zero-length edges between duplicate
    points are stored explicitly so they still connect.
    """
    d = pairwise_sq_dists(points) if sq_dists is None else sq_dists
    n = len(d)
    if not 1 <= k < n:
        raise ValueError(f"k must be in 1..{n - 1}, got {k}")
    masked = d.copy()
    np.fill_diagonal(masked, np.inf)
    nbrs = np.argsort(masked, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = nbrs.ravel()
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    pairs = np.unique(lo * n + hi)
    lo, hi = pairs // n, pairs % n
    w = np.sqrt(d[lo, hi])
    return sp.csr_array((np.concatenate([w, w]), (np.concatenate([lo, hi]), np.concatenate([hi, lo]))),
                        shape=(n, n))


def graph_edges(graph) -> set[tuple[int, int]]:
    coo = graph.tocoo()
    return {(int(i), int(j)) for i, j in zip(coo.row, coo.col) if i < j}


def geodesics(graph):
    """All-pairs shortest-path lengths (inf when unreachable) and component labels."""
    dist = dijkstra(graph, directed=False)
    _, comp = connected_components(graph, directed=False)
    return dist, comp


def classical_mds(dists, dim: int, seed: int = 0) -> np.ndarray:
    """Coordinates whose Euclidean distances best reproduce ``dists``.

    Double-centres the squared distances, keeps the ``dim`` largest eigenpairs
    (negative eigenvalues clamped to zero) and fixes each axis' sign so its
    largest-magnitude entry is positive.
    """
    d = np.asarray(dists, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise NonSymmetric(f"expected a square matrix, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise NaNInput("distance matrix has NaN or infinite entries")
    scale = max(np.abs(d).max(), 1.0)
    if not np.allclose(d, d.T, rtol=0, atol=1e-12 * scale):
        raise NonSymmetric("distance matrix is not symmetric")
    m = len(d)
    d2 = d * d
    b = d2 - d2.mean(axis=0)[None, :]
    b = b - b.mean(axis=1)[:, None]
    b = -0.5 * (0.5 * (b + b.T))
    k = min(dim, m)
    w, v = top_eigenpairs(b, k, seed=seed)
    coords = v * np.sqrt(np.maximum(w, 0.0))[None, :]
    for j in range(k):
        i = int(np.argmax(np.abs(coords[:, j])))
        if coords[i, j] < 0:
            coords[:, j] = -coords[:, j]
    if k < dim:
        coords = np.hstack([coords, np.zeros((m, dim - k))])
    return coords


def residual_variance(geo, coords) -> float:
    """1 - r**2 between graph distances and embedded distances (upper triangle)."""
    iu = np.triu_indices(len(geo), 1)
    emb = np.sqrt(pairwise_sq_dists(coords))[iu]
    g = geo[iu]
    if len(g) < 2 or np.std(g) == 0 or np.std(emb) == 0:
        return 0.0
    r = np.corrcoef(g, emb)[0, 1]
    return float(1.0 - r * r)


def isomap(points, cfg: IsomapConfig = IsomapConfig(), labels=None) -> Embedding:
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n <= cfg.k_neighbors:
        raise ValueError(f"Isomap with k={cfg.k_neighbors} needs more than k points, got {n}")
    graph = knn_graph(x, cfg.k_neighbors)
    dist, comp = geodesics(graph)
    sizes = np.bincount(comp)
    largest = int(np.argmax(sizes))  # lowest component id on ties
    keep = np.flatnonzero(comp == largest)
    dropped = np.flatnonzero(comp != largest)
    if len(dropped):
        log.warning("isomap: graph has %d components; embedding %d of %d points",
                    len(sizes), len(keep), n)
    geo = dist[np.ix_(keep, keep)]
    coords = classical_mds(geo, cfg.output_dim, seed=cfg.seed)
    lab = None if labels is None else np.asarray(labels)[keep]
    return Embedding(coords, lab, "isomap", residual_variance(geo, coords), "residual_variance",
                     keep, dropped)


# -- helpers used by the CLI -------------------------------------------------

def stratified_subsample(labels, cap: int, seed: int) -> np.ndarray:
    """Sorted indices of at most ``cap`` points, allocated to classes proportionally."""
    labels = np.asarray(labels)
    n = len(labels)
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * cap / n
    take = np.floor(quota).astype(int)
    # largest remainder, ties to the lower class id
    rest = cap - take.sum()
    order = np.lexsort((classes, -(quota - take)))
    take[order[:rest]] += 1
    out = []
    for c, t in zip(classes, take):
        idx = np.flatnonzero(labels == c)
        out.append(np.sort(rng.choice(idx, size=t, replace=False)))
    return np.sort(np.concatenate(out))


def class_dispersion(emb: Embedding) -> dict[int, float]:
    """Root-mean-square distance of each class' points from their centroid."""
    out = {}
    if emb.labels is None:
        return out
    for c in np.unique(emb.labels):
        pts = emb.coordinates[emb.labels == c]
        out[int(c)] = float(np.sqrt(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1))))
    return out


def write_embedding_csv(path, emb: Embedding, source_indices=None) -> None:
    src = np.arange(len(emb.indices)) if source_indices is None else np.asarray(source_indices)
    axes = ["x", "y", "z"][:emb.coordinates.shape[1]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", *axes])
        for row, i in enumerate(emb.indices):
            lab = "" if emb.labels is None else int(emb.labels[row])
            w.writerow([int(src[i]), lab, *(repr(float(v)) for v in emb.coordinates[row])])
