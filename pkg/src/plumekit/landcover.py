"""Land-cover classification from spectral indices and per-class statistics.

Pixels are binned on the NDVI scale (-1..+1 split into 20 uniform classes);
a high NDWI overrides the bin with a dedicated water class. Classes smaller
than a pixel floor are merged into adjacent classes so that covariance
estimates are not dominated by a handful of samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    DegenerateClass,
    DimensionMismatch,
    IoFailure,
    NotPositiveDefinite,
)
from .hsi_io import HyperCube
from .spectra import IndexMap

N_BINS = 20
WATER_LABEL = N_BINS  # water sits after the NDVI bins, adjacent to bin 0
WATER_NDWI_THRESHOLD = 0.3
DEFAULT_MIN_PIXELS = 10000
DEFAULT_EPS_SCALE = 1e-6

STATS_FORMAT_VERSION = 1


@dataclass
class ClassMap:
    """Per-pixel class labels with counts and the class adjacency chain.

    ``labels`` is -1 at invalid pixels. ``chain`` lists label ids in merge
    adjacency order (water first, then NDVI bins low to high).
    """

    labels: np.ndarray
    counts: np.ndarray
    chain: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.counts)

    @property
    def valid(self) -> np.ndarray:
        return self.labels >= 0


def classify(ndvi: IndexMap, ndwi: IndexMap,
             water_threshold: float = WATER_NDWI_THRESHOLD) -> ClassMap:
    """Label pixels by NDVI bin, overriding wet pixels with the water class."""
    if ndvi.shape != ndwi.shape:
        raise DimensionMismatch(f"ndvi {ndvi.shape} vs ndwi {ndwi.shape}")
    bins = np.floor((ndvi.values + 1.0) / 0.1).astype(np.int32)
    np.clip(bins, 0, N_BINS - 1, out=bins)
    labels = bins
    labels[ndwi.valid & (ndwi.values > water_threshold)] = WATER_LABEL
    labels[~(ndvi.valid & ndwi.valid)] = -1
    counts = np.bincount(labels[labels >= 0].ravel(), minlength=N_BINS + 1)
    chain = np.concatenate([[WATER_LABEL], np.arange(N_BINS)])
    return ClassMap(labels=labels, counts=counts, chain=chain.astype(np.int32))


def merge_small_classes(cm: ClassMap, min_pixels: int = DEFAULT_MIN_PIXELS) -> ClassMap:
    """Merge undersized classes into chain neighbors until all reach the floor.

    The smallest class merges first; a mid-chain class joins whichever
    neighbor has fewer pixels. Labels are relabeled densely in chain order.
    Classes with zero pixels simply disappear.
    """
    groups = [[int(label)] for label in cm.chain]
    counts = [int(cm.counts[label]) for label in cm.chain]

    # drop empty bins up front; they carry no pixels to merge
    groups = [g for g, c in zip(groups, counts) if c > 0]
    counts = [c for c in counts if c > 0]

    while len(groups) > 1:
        small = [i for i, c in enumerate(counts) if c < min_pixels]
        if not small:
            break
        i = min(small, key=lambda j: (counts[j], j))
        if i == 0:
            j = 1
        elif i == len(groups) - 1:
            j = i - 1
        else:
            j = i - 1 if counts[i - 1] <= counts[i + 1] else i + 1
        lo, hi = min(i, j), max(i, j)
        groups[lo] = groups[lo] + groups[hi]
        counts[lo] = counts[lo] + counts[hi]
        del groups[hi], counts[hi]

    remap = np.full(cm.chain.max() + 1, -1, dtype=np.int32)
    for new_label, members in enumerate(groups):
        for old in members:
            remap[old] = new_label
    labels = np.where(cm.labels >= 0, remap[np.maximum(cm.labels, 0)], -1)
    return ClassMap(labels=labels.astype(np.int32),
                    counts=np.asarray(counts, dtype=np.int64),
                    chain=np.arange(len(groups), dtype=np.int32))


@dataclass
class ClassStats:
    """Per-class mean, covariance and regularized inverse."""

    means: np.ndarray      # (K, N)
    covs: np.ndarray       # (K, N, N)
    inverses: np.ndarray   # (K, N, N), inverse of cov + eps*I
    eps: np.ndarray        # (K,)
    counts: np.ndarray     # (K,)

    @property
    def n_classes(self) -> int:
        return len(self.counts)


def regularized_inverse(cov: np.ndarray, eps: float) -> np.ndarray:
    """Symmetric inverse of cov + eps*I via Cholesky."""
    n = cov.shape[0]
    try:
        factor = cho_factor(cov + eps * np.eye(n), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    inv = cho_solve(factor, np.eye(n))
    return 0.5 * (inv + inv.T)


def covariance_epsilon(cov: np.ndarray, eps_scale: float) -> float:
    """Regularization strength scaled by the mean diagonal power.

    Falls back to the raw scale for zero-scatter classes so the inverse stays
    defined (identical pixels still get a usable whitener).
    """
    trace = float(np.trace(cov))
    return eps_scale * (trace / cov.shape[0]) if trace > 0 else eps_scale


def class_stats(cube: HyperCube, cm: ClassMap,
                eps_scale: float = DEFAULT_EPS_SCALE,
                chunk_rows: int = 256) -> ClassStats:
    """Mean and 1/N covariance per class, accumulated in float64.

    Two passes over the cube in fixed ascending row order so results are
    reproducible bit for bit.
    """
    if cm.labels.shape != (cube.meta.height, cube.meta.width):
        raise DimensionMismatch(
            f"class map {cm.labels.shape} vs cube {(cube.meta.height, cube.meta.width)}"
        )
    k_count = cm.n_classes
    n = cube.meta.bands
    counts = np.zeros(k_count, dtype=np.int64)
    sums = np.zeros((k_count, n))

    def chunks():
        for r0 in range(0, cube.meta.height, chunk_rows):
            r1 = min(r0 + chunk_rows, cube.meta.height)
            block, valid = cube.read_block((r0, r1), (0, cube.meta.width))
            ok = np.all(valid, axis=2)
            labels = cm.labels[r0:r1]
            yield block, ok & (labels >= 0), labels

    for block, ok, labels in chunks():
        for k in range(k_count):
            sel = ok & (labels == k)
            if sel.any():
                counts[k] += int(sel.sum())
                sums[k] += block[sel].sum(axis=0)

    for k in range(k_count):
        if counts[k] < 2:
            raise DegenerateClass(f"class {k} has {counts[k]} samples, need >= 2")
    means = sums / counts[:, None]

    scatter = np.zeros((k_count, n, n))
    for block, ok, labels in chunks():
        for k in range(k_count):
            sel = ok & (labels == k)
            if sel.any():
                d = block[sel] - means[k]
                scatter[k] += d.T @ d

    covs = scatter / counts[:, None, None]
    covs = 0.5 * (covs + covs.transpose(0, 2, 1))
    eps = np.array([covariance_epsilon(covs[k], eps_scale) for k in range(k_count)])
    inverses = np.stack([regularized_inverse(covs[k], eps[k]) for k in range(k_count)])
    return ClassStats(means=means, covs=covs, inverses=inverses, eps=eps,
                      counts=counts)


def save_class_stats(path_stem, stats: ClassStats) -> None:
    """Serialize statistics to a versioned binary sidecar."""
    from .serialize import save_arrays

    save_arrays(path_stem, {
        "format_version": np.int64(STATS_FORMAT_VERSION),
        "means": stats.means, "covs": stats.covs, "inverses": stats.inverses,
        "eps": stats.eps, "counts": stats.counts,
    })


def load_class_stats(path_stem) -> ClassStats:
    from .serialize import load_arrays

    arx = load_arrays(path_stem)
    version = int(arx["format_version"].item())
    if version != STATS_FORMAT_VERSION:
        raise IoFailure(f"unsupported stats format version {version}")
    return ClassStats(means=arx["means"], covs=arx["covs"],
                      inverses=arx["inverses"], eps=arx["eps"],
                      counts=arx["counts"])


def export_classmap_png(path, cm: ClassMap) -> None:
    """Write labels as a single-band PNG, gray = (label+1) scaled to 0..255."""
    from PIL import Image

    k = max(cm.n_classes, 1)
    gray = np.zeros(cm.labels.shape, dtype=np.uint8)
    lit = cm.labels >= 0
    gray[lit] = np.round(255.0 * (cm.labels[lit] + 1) / k).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(Path(path), format="PNG")
