"""Matched filtering for CH4 enhancement.

The per-pixel score whitens the background with a covariance estimate and
projects onto the CH4 absorption signature:

    score(x) = (x - mu)^T C^-1 t / sqrt(t^T C^-1 t)

Under background-only pixels the score is standardized (mean 0, variance 1).
The traditional filter estimates (mu, C) over windows of adjacent image
columns; the class-aware variant estimates them per land-cover class, and
optionally per (class, sensor-window) cell so each push-broom sensor group is
whitened against its own statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import (
    DegenerateClass,
    DegenerateWindow,
    DimensionMismatch,
    MissingClassStats,
    NotPositiveDefinite,
    ZeroDenominator,
)
from .hsi_io import GltMap, HyperCube
from .landcover import (
    DEFAULT_EPS_SCALE,
    ClassMap,
    ClassStats,
    class_stats,
    covariance_epsilon,
)

DEFAULT_SENSOR_WINDOW = 11  # midpoint of the 10-15 adjacent sensors heuristic


@dataclass
class EnhancementMap:
    """Scalar CH4 enhancement field, standardized against the background."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SensorGrouping:
    """Per-pixel sensor-window id derived from the GLT; -1 where unmapped."""

    ids: np.ndarray
    window: int


def sensor_groups(glt: GltMap, window: int) -> SensorGrouping:
    """Group raw sensor columns into windows of ``window`` adjacent sensors."""
    if window < 1:
        raise DimensionMismatch(f"window must be >= 1, got {window}")
    ids = np.where(glt.mapped, (glt.orig_col - 1) // window, -1)
    return SensorGrouping(ids=ids.astype(np.int32), window=int(window))


def _signature_vector(t, bands: int) -> np.ndarray:
    values = np.asarray(getattr(t, "values", t), dtype=float)
    if values.shape != (bands,):
        raise DimensionMismatch(
            f"signature length {values.shape} does not match {bands} bands"
        )
    return values


def _whitened_signature(cov: np.ndarray, eps: float, t: np.ndarray):
    """Solve (cov + eps*I) a = t and the score normalizer sqrt(t^T a)."""
    n = cov.shape[0]
    try:
        factor = cho_factor(cov + eps * np.eye(n), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    a = cho_solve(factor, t)
    quad = float(t @ a)
    if quad <= 0:
        raise ZeroDenominator("t^T C^-1 t is not positive")
    return a, np.sqrt(quad)


def _cell_statistics(cube: HyperCube, selector: np.ndarray, chunk_rows: int):
    """Mean and 1/N covariance over the selected valid pixels."""
    n = cube.meta.bands
    count = 0
    total = np.zeros(n)
    for r0 in range(0, cube.meta.height, chunk_rows):
        r1 = min(r0 + chunk_rows, cube.meta.height)
        block, valid = cube.read_block((r0, r1), (0, cube.meta.width))
        sel = selector[r0:r1] & np.all(valid, axis=2)
        if sel.any():
            count += int(sel.sum())
            total += block[sel].sum(axis=0)
    if count < 2:
        raise DegenerateClass(f"{count} valid samples, need >= 2")
    mean = total / count
    scatter = np.zeros((n, n))
    for r0 in range(0, cube.meta.height, chunk_rows):
        r1 = min(r0 + chunk_rows, cube.meta.height)
        block, valid = cube.read_block((r0, r1), (0, cube.meta.width))
        sel = selector[r0:r1] & np.all(valid, axis=2)
        if sel.any():
            d = block[sel] - mean
            scatter += d.T @ d
    cov = scatter / count
    return mean, 0.5 * (cov + cov.T), count


def slf_enhance(cube: HyperCube, cm: ClassMap, stats: ClassStats, t,
                grouping: SensorGrouping | None = None,
                min_cell_samples: int | None = None,
                eps_scale: float = DEFAULT_EPS_SCALE,
                chunk_rows: int = 256) -> EnhancementMap:
    """Score every pixel against the statistics of its land-cover class.

    With ``grouping``, statistics are recomputed per (class, sensor-window)
    cell; cells with fewer than ``min_cell_samples`` valid pixels (default
    max(2 * bands, 1000)) and unmapped pixels fall back to the class-only
    statistics.
    """
    height, width, bands = cube.shape
    if cm.labels.shape != (height, width):
        raise DimensionMismatch(f"class map {cm.labels.shape} vs cube {(height, width)}")
    if cm.labels.max() >= stats.n_classes:
        raise MissingClassStats(
            f"labels reach {cm.labels.max()} but stats cover {stats.n_classes} classes"
        )
    tvec = _signature_vector(t, bands)

    class_filters = [
        (stats.means[k], *_whitened_signature(stats.covs[k], stats.eps[k], tvec))
        for k in range(stats.n_classes)
    ]

    cell_filters = {}
    if grouping is not None:
        if grouping.ids.shape != (height, width):
            raise DimensionMismatch(
                f"grouping {grouping.ids.shape} vs cube {(height, width)}"
            )
        floor = min_cell_samples if min_cell_samples is not None \
            else max(2 * bands, 1000)
        pairs = np.unique(
            np.stack([cm.labels.ravel(), grouping.ids.ravel()], axis=1), axis=0
        )
        for k, w in pairs:
            if k < 0 or w < 0:
                continue
            selector = (cm.labels == k) & (grouping.ids == w)
            if int(selector.sum()) < floor:
                continue
            try:
                mean, cov, _ = _cell_statistics(cube, selector, chunk_rows)
            except DegenerateClass:
                continue
            eps = covariance_epsilon(cov, eps_scale)
            cell_filters[(int(k), int(w))] = (mean, *_whitened_signature(cov, eps, tvec))

    values = np.zeros((height, width))
    overall_valid = np.zeros((height, width), dtype=bool)
    for r0 in range(0, height, chunk_rows):
        r1 = min(r0 + chunk_rows, height)
        block, valid = cube.read_block((r0, r1), (0, width))
        ok = np.all(valid, axis=2)
        labels = cm.labels[r0:r1]
        ids = grouping.ids[r0:r1] if grouping is not None else None
        out = values[r0:r1]
        usable = ok & (labels >= 0)
        overall_valid[r0:r1] = usable
        for k in np.unique(labels[usable]):
            sel_k = usable & (labels == k)
            if ids is None:
                groups = [(sel_k, class_filters[k])]
            else:
                groups = []
                rest = sel_k.copy()
                for w in np.unique(ids[sel_k]):
                    filt = cell_filters.get((int(k), int(w)))
                    if filt is not None:
                        sel_kw = sel_k & (ids == w)
                        groups.append((sel_kw, filt))
                        rest &= ~sel_kw
                if rest.any():
                    groups.append((rest, class_filters[k]))
            for sel, (mean, a, denom) in groups:
                if sel.any():
                    out[sel] = (block[sel] - mean) @ a / denom
    return EnhancementMap(values=values, valid=overall_valid)


def _column_window_map(height: int, width: int, column_window: int) -> ClassMap:
    window_of_col = np.arange(width) // column_window
    labels = np.broadcast_to(window_of_col[None, :], (height, width)).astype(np.int32)
    n_windows = int(window_of_col[-1]) + 1
    counts = np.bincount(labels.ravel(), minlength=n_windows)
    return ClassMap(labels=np.ascontiguousarray(labels), counts=counts,
                    chain=np.arange(n_windows, dtype=np.int32))


def matched_filter_traditional(cube: HyperCube, t, column_window: int,
                               eps_scale: float = DEFAULT_EPS_SCALE,
                               chunk_rows: int = 256) -> EnhancementMap:
    """Classic matched filter with statistics per window of adjacent columns.

    Equivalent to the class-aware scorer with classes defined by the column
    windows, which is exactly how it is implemented.
    """
    if column_window < 1:
        raise DegenerateWindow(f"column_window must be >= 1, got {column_window}")
    cm = _column_window_map(cube.meta.height, cube.meta.width, column_window)
    try:
        stats = class_stats(cube, cm, eps_scale=eps_scale, chunk_rows=chunk_rows)
    except DegenerateClass as exc:
        raise DegenerateWindow(str(exc)) from exc
    return slf_enhance(cube, cm, stats, t, chunk_rows=chunk_rows)


def mgr(alpha: np.ndarray, t, cov: np.ndarray) -> float:
    """Methane-to-ground-terrain ratio |alpha^T t|^2 / (alpha^T Cov alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    tvec = _signature_vector(t, alpha.shape[0])
    denom = float(alpha @ cov @ alpha)
    if denom <= 0:
        raise ZeroDenominator("alpha^T Cov alpha must be positive")
    return float(np.abs(alpha @ tvec) ** 2 / denom)
