"""Majority-class reduction by k-means, dihedral augmentation and channel dropping."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataio import MAJORITY_CLASS, MINORITY_CLASSES, NUM_CLASSES, ImageSet
from .errors import ClassTooSmall, IndexOutOfRange, TooFewPoints

CHANNEL_CONFIGS = {"rgb": (0, 1, 2), "rg": (0, 1), "rb": (0, 2)}

DIHEDRAL_NAMES = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip",
                  "transpose", "anti-transpose")

# rows of the distance matrix processed per block; bounds peak memory
_BLOCK = 1024


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 1000
    max_iter: int = 100
    tol: float = 1e-4
    seed: int = 0
    init: str = "kmeans++"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.init not in ("kmeans++", "random-points"):
            raise ValueError(f"unknown init {self.init!r}")


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iterations_run: int
    inertia_history: list = field(default_factory=list)


def flatten(img) -> np.ndarray:
    """Row-major (row, column, channel) float64 vector scaled to [0, 1]."""
    return np.asarray(img, dtype=np.float64).reshape(-1) / 255.0


def flatten_batch(images) -> np.ndarray:
    images = np.asarray(images)
    return images.reshape(len(images), -1).astype(np.float64) / 255.0


def _sq_norms(x):
    return np.einsum("ij,ij->i", x, x)


def _assign(points, centroids, pnorm):
    """Nearest centroid per point (lowest id on ties) and the exact squared distance."""
    cnorm = _sq_norms(centroids)
    labels = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), _BLOCK):
        blk = points[s:s + _BLOCK]
        d = pnorm[s:s + _BLOCK, None] - 2.0 * blk @ centroids.T + cnorm[None, :]
        labels[s:s + _BLOCK] = np.argmin(d, axis=1)
    return labels, _point_costs(points, centroids, labels)


def _point_costs(points, centroids, labels):
    out = np.empty(len(points))
    for s in range(0, len(points), _BLOCK):
        diff = points[s:s + _BLOCK] - centroids[labels[s:s + _BLOCK]]
        out[s:s + _BLOCK] = np.einsum("ij,ij->i", diff, diff)
    return out


def _init_plus_plus(points, k, rng, pnorm):
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = np.maximum(pnorm - 2.0 * points @ points[chosen[0]] + pnorm[chosen[0]], 0.0)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            i = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            i = min(i, n - 1)
        else:
            # every point coincides with a chosen centre; fall back to an unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            i = int(unused[rng.integers(len(unused))])
        chosen.append(i)
        d = np.maximum(pnorm - 2.0 * points @ points[i] + pnorm[i], 0.0)
        np.minimum(closest, d, out=closest)
    return points[chosen].copy()


def _centroid_means(points, labels, k, old):
    order = np.argsort(labels, kind="stable")
    counts = np.bincount(labels, minlength=k)
    present = np.flatnonzero(counts)
    starts = np.concatenate([[0], np.cumsum(counts[present])[:-1]])
    sums = np.add.reduceat(points[order], starts, axis=0)
    centroids = old.copy()
    centroids[present] = sums / counts[present, None]
    return centroids, np.flatnonzero(counts == 0)


def kmeans(points, cfg: KMeansConfig) -> KMeansResult:
    """Lloyd's algorithm from a seeded kmeans++ (or random-point) start.

    Stops when the relative inertia improvement drops below ``cfg.tol`` or after
    ``cfg.max_iter`` update steps. Clusters left empty by an update are moved onto
    the point currently farthest from its centroid.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    n = len(points)
    if n < cfg.k:
        raise TooFewPoints(f"k-means with k={cfg.k} needs at least k points, got {n}")
    rng = np.random.default_rng(cfg.seed)
    pnorm = _sq_norms(points)
    if cfg.init == "kmeans++":
        centroids = _init_plus_plus(points, cfg.k, rng, pnorm)
    else:
        centroids = points[np.sort(rng.choice(n, cfg.k, replace=False))].copy()

    labels, cost = _assign(points, centroids, pnorm)
    inertia = float(cost.sum())
    history = [inertia]
    it = 0
    while it < cfg.max_iter and inertia > 0:
        it += 1
        centroids, empty = _centroid_means(points, labels, cfg.k, centroids)
        if len(empty):
            cost = _point_costs(points, centroids, labels)
            for j in empty:
                far = int(np.argmax(cost))
                centroids[j] = points[far]
                cost[far] = 0.0
        labels, cost = _assign(points, centroids, pnorm)
        prev, inertia = inertia, float(cost.sum())
        history.append(inertia)
        if prev - inertia < cfg.tol * prev:
            break
    return KMeansResult(centroids, labels, inertia, it, history)


def nearest_to_centroids(points, centroids) -> np.ndarray:
    """One distinct point index per centroid, claimed greedily in centroid order."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    n, k = len(points), len(centroids)
    if n < k:
        raise TooFewPoints(f"{k} centroids but only {n} points")
    pnorm = _sq_norms(points)
    cnorm = _sq_norms(centroids)
    taken = np.zeros(n, dtype=bool)
    out = np.empty(k, dtype=np.int64)
    for s in range(0, k, _BLOCK):
        blk = centroids[s:s + _BLOCK]
        d = cnorm[s:s + _BLOCK, None] - 2.0 * blk @ points.T + pnorm[None, :]
        for r, row in enumerate(d):
            row[taken] = np.inf
            i = int(np.argmin(row))
            out[s + r] = i
            taken[i] = True
    return out


def apply_transform(img, code: int) -> np.ndarray:
    """Apply dihedral symmetry ``code`` (0..7) to the two leading spatial axes."""
    img = np.asarray(img)
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"dihedral transforms need a square image, got {img.shape[:2]}")
    if code == 0:
        out = img
    elif code in (1, 2, 3):
        out = np.rot90(img, code, axes=(0, 1))
    elif code == 4:
        out = img[:, ::-1]
    elif code == 5:
        out = img[::-1, :]
    elif code == 6:
        out = np.swapaxes(img, 0, 1)
    elif code == 7:
        out = np.swapaxes(img[::-1, ::-1], 0, 1)
    else:
        raise ValueError(f"dihedral code must be in 0..7, got {code}")
    return np.ascontiguousarray(out)


def drop_channels(img, config: str) -> np.ndarray:
    """Keep the channels of ``config`` (rgb, rg or rb) along the last axis."""
    try:
        keep = CHANNEL_CONFIGS[config.lower()]
    except KeyError:
        raise ValueError(f"unknown channel config {config!r}") from None
    img = np.asarray(img)
    if keep == (0, 1, 2):
        return img
    return np.ascontiguousarray(img[..., list(keep)])


def augmentation_directives(sources, target: int) -> list[tuple[int, int]]:
    """(source, code) pairs growing ``sources`` towards ``target`` images.

    Codes 1..7 are cycled in rounds; each round visits every source in index order.
    Growth stops at the 8x dihedral ceiling.
    """
    sources = list(sources)
    need = min(max(target - len(sources), 0), 7 * len(sources))
    out = []
    for code in range(1, 8):
        for s in sources:
            if len(out) == need:
                return out
            out.append((int(s), code))
    return out


@dataclass
class SelectionPlan:
    kept: dict
    augment: dict
    channel_config: str = "rgb"
    info: dict = field(default_factory=dict)

    def class_sizes(self) -> list[int]:
        return [len(self.kept.get(c, [])) + len(self.augment.get(c, []))
                for c in range(NUM_CLASSES)]

    def to_json(self) -> str:
        doc = {
            "channel_config": self.channel_config,
            "class_sizes": self.class_sizes(),
            "info": self.info,
            "classes": {str(c): {"kept": [int(i) for i in self.kept.get(c, [])],
                                 "augment": [[int(s), int(t)] for s, t in self.augment.get(c, [])]}
                        for c in range(NUM_CLASSES)},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SelectionPlan":
        doc = json.loads(text)
        kept = {int(c): [int(i) for i in v["kept"]] for c, v in doc["classes"].items()}
        augment = {int(c): [(int(s), int(t)) for s, t in v["augment"]]
                   for c, v in doc["classes"].items()}
        for c, dirs in augment.items():
            if any(not 0 <= t <= 7 for _, t in dirs):
                raise ValueError(f"class {c}: invalid dihedral code in plan")
        return cls(kept, augment, doc.get("channel_config", "rgb"), doc.get("info", {}))


def build_selection_plan(train: ImageSet, cfg: KMeansConfig, aug_target: int = 400,
                         channel_config: str = "rgb",
                         result_out: Optional[list] = None) -> SelectionPlan:
    """Reduce the majority class to ``cfg.k`` centroid-nearest images and augment
    the two smallest classes towards ``aug_target``."""
    if channel_config.lower() not in CHANNEL_CONFIGS:
        raise ValueError(f"unknown channel config {channel_config!r}")
    kept, augment = {}, {}
    for c in range(NUM_CLASSES):
        kept[c] = [int(i) for i in np.flatnonzero(train.labels == c)]
        augment[c] = []

    major = np.asarray(kept[MAJORITY_CLASS])
    if len(major) < cfg.k:
        raise ClassTooSmall(f"class {MAJORITY_CLASS} has {len(major)} images, k={cfg.k}")
    x = flatten_batch(train.images[major])
    res = kmeans(x, cfg)
    picked = nearest_to_centroids(x, res.centroids)
    kept[MAJORITY_CLASS] = sorted(int(i) for i in major[picked])
    if result_out is not None:
        result_out.append(res)

    for c in MINORITY_CLASSES:
        augment[c] = augmentation_directives(kept[c], aug_target)

    info = {"k": cfg.k, "seed": cfg.seed, "init": cfg.init, "max_iter": cfg.max_iter,
            "tol": cfg.tol, "aug_target": aug_target,
            "kmeans_inertia": res.inertia, "kmeans_iterations": res.iterations_run}
    return SelectionPlan(kept, augment, channel_config.lower(), info)


def materialize(train: ImageSet, plan: SelectionPlan,
                channel_config: Optional[str] = None) -> ImageSet:
    """Build the reduced training set.

    Classes ascending; within a class the kept originals come first, then the
    augmented copies, each in plan order. Channel dropping is applied last.
    """
    n = len(train)
    imgs, labs = [], []
    for c in range(NUM_CLASSES):
        kept = np.asarray(plan.kept.get(c, []), dtype=np.int64)
        dirs = plan.augment.get(c, [])
        srcs = np.asarray([s for s, _ in dirs], dtype=np.int64)
        for idx in (kept, srcs):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise IndexOutOfRange(f"class {c}: index outside 0..{n - 1}")
            if idx.size and np.any(train.labels[idx] != c):
                raise IndexOutOfRange(f"class {c}: plan references images of another class")
        if kept.size:
            imgs.append(train.images[kept])
            labs.append(np.full(kept.size, c))
        if dirs:
            imgs.append(np.stack([apply_transform(train.images[s], t) for s, t in dirs]))
            labs.append(np.full(len(dirs), c))
    images = np.concatenate(imgs) if imgs else train.images[:0]
    labels = np.concatenate(labs) if labs else np.zeros(0, dtype=np.int64)
    images = drop_channels(images, channel_config or plan.channel_config)
    return ImageSet(train.split, images, labels)
