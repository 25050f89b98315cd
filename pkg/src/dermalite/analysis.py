"""Exploratory statistics over image splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import CLASSES, NUM_CLASSES, ImageSet
from .errors import ConstantInput, EmptyClass, EmptyInput, LengthMismatch, UnknownClass

CHANNEL_NAMES = ("R", "G", "B")


@dataclass(frozen=True)
class ClassHistogram:
    counts: tuple

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass(frozen=True)
class BoxStats:
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple


def class_histogram(images: ImageSet) -> ClassHistogram:
    counts = np.bincount(images.labels, minlength=NUM_CLASSES)
    return ClassHistogram(tuple(int(c) for c in counts))


def imbalance_index(hist: ClassHistogram) -> float:
    """Smallest class count divided by the largest."""
    if min(hist.counts) == 0:
        empty = [CLASSES[i].acronym for i, c in enumerate(hist.counts) if c == 0]
        raise EmptyClass(f"imbalance index undefined, empty classes: {', '.join(empty)}")
    return min(hist.counts) / max(hist.counts)


def channel_means(img) -> np.ndarray:
    """Per-channel mean of one H x W x C image, in float64."""
    img = np.asarray(img)
    return img.reshape(-1, img.shape[-1]).mean(axis=0, dtype=np.float64)


def set_channel_means(images: ImageSet) -> np.ndarray:
    """N x C matrix of per-image channel means."""
    x = images.images
    # integer sums of <= 784 uint8 values are exact in float64, so order is irrelevant
    return x.reshape(len(x), x.shape[1] * x.shape[2], x.shape[-1]).sum(axis=1, dtype=np.float64) / (x.shape[1] * x.shape[2])


def box_stats(values) -> BoxStats:
    """Tukey box-plot summary; quartiles use linear interpolation."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise EmptyInput("box_stats needs at least one value")
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = v[(v < lo_fence) | (v > hi_fence)]
    return BoxStats(float(q1), float(med), float(q3), float(inside.min()), float(inside.max()),
                    tuple(float(o) for o in outliers))


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LengthMismatch(f"{x.size} vs {y.size} values")
    if x.size < 2:
        raise LengthMismatch("pearson needs at least two pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(dx, dx)), np.sqrt(np.dot(dy, dy))
    if sx == 0 or sy == 0:
        raise ConstantInput("correlation undefined for constant input")
    r = np.dot(dx, dy) / (sx * sy)
    return float(min(1.0, max(-1.0, r)))


def correlation_matrix(images: ImageSet) -> np.ndarray:
    """Pairwise Pearson correlation of per-image channel means (C x C)."""
    feats = set_channel_means(images)
    c = feats.shape[1]
    out = np.eye(c)
    for i in range(c):
        for j in range(i + 1, c):
            out[i, j] = out[j, i] = pearson(feats[:, i], feats[:, j])
    return out


def intensity_distribution(images: ImageSet, cls: int, channel: int, bins: int) -> np.ndarray:
    """Histogram over [0, 255] of one channel's per-image mean within one class."""
    if not 0 <= int(cls) < NUM_CLASSES:
        raise UnknownClass(f"class {cls}")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not 0 <= channel < images.channels:
        raise ValueError(f"channel {channel} out of range for {images.channels}-channel images")
    means = set_channel_means(images.subset(np.flatnonzero(images.labels == cls)))
    counts, _ = np.histogram(means[:, channel] if len(means) else np.empty(0), bins=bins, range=(0.0, 255.0))
    return counts


def box_table(images: ImageSet) -> list[tuple[int, int, BoxStats]]:
    """Box statistics of channel means for every (class, channel) with data."""
    feats = set_channel_means(images)
    rows = []
    for c in range(NUM_CLASSES):
        sel = feats[images.labels == c]
        if len(sel) == 0:
            continue
        for ch in range(feats.shape[1]):
            rows.append((c, ch, box_stats(sel[:, ch])))
    return rows


# -- CSV emitters ------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_histogram_csv(path, hist: ClassHistogram) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["class", "acronym", "count"])
        for cid, n in zip(CLASSES, hist.counts):
            w.writerow([cid.index, cid.acronym, n])


def write_channel_means_csv(path, images: ImageSet) -> None:
    feats = set_channel_means(images)
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["index", "label"] + [n.lower() for n in CHANNEL_NAMES[:feats.shape[1]]])
        for i, (lab, row) in enumerate(zip(images.labels, feats)):
            w.writerow([i, int(lab)] + [_fmt(v) for v in row])


def write_correlation_csv(path, corr: np.ndarray) -> None:
    names = CHANNEL_NAMES[:len(corr)]
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["channel", *names])
        for name, row in zip(names, corr):
            w.writerow([name, *(_fmt(v) for v in row)])


def write_boxstats_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["class", "channel", "q1", "median", "q3", "lo", "hi", "n_outliers"])
        for c, ch, b in rows:
            w.writerow([CLASSES[c].acronym, CHANNEL_NAMES[ch], _fmt(b.q1), _fmt(b.median),
                        _fmt(b.q3), _fmt(b.whisker_low), _fmt(b.whisker_high), len(b.outliers)])


def write_distributions_csv(path, images: ImageSet, bins: int) -> None:
    edges = np.linspace(0.0, 255.0, bins + 1)
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["class", "channel", "bin", "lo", "hi", "count"])
        for c in range(NUM_CLASSES):
            for ch in range(images.channels):
                counts = intensity_distribution(images, c, ch, bins)
                for b, n in enumerate(counts):
                    w.writerow([CLASSES[c].acronym, CHANNEL_NAMES[ch], b,
                                _fmt(edges[b]), _fmt(edges[b + 1]), int(n)])


def write_stats(out_dir, images: ImageSet, bins: int = 32) -> list[Path]:
    """Emit every stats table for ``images``; returns the written paths."""
    out_dir = Path(out_dir)
    hist = class_histogram(images)
    paths = {name: out_dir / name for name in (
        "histogram.csv", "channel_means.csv", "correlation.csv", "boxstats.csv",
        "distributions.csv")}
    write_histogram_csv(paths["histogram.csv"], hist)
    write_channel_means_csv(paths["channel_means.csv"], images)
    write_correlation_csv(paths["correlation.csv"], correlation_matrix(images))
    write_boxstats_csv(paths["boxstats.csv"], box_table(images))
    write_distributions_csv(paths["distributions.csv"], images, bins)
    return list(paths.values())
