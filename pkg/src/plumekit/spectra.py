"""Wavelength band selection, color/index composition and the CH4 signature.

Band averages are Gaussian-weighted over wavelength rather than single-channel
picks, which smooths sensor noise across the ~5 nm channel spacing.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import AllZeroSignature, EmptySelection, MalformedTable
from .hsi_io import CubeMeta, HyperCube

# Gaussian weighting widths (nm): wide for color rendering, tighter for the
# reflectance samples feeding the normalized-difference indices.
RGB_SIGMA_NM = 30.0
INDEX_SIGMA_NM = 20.0

RED_NM = 660.0
GREEN_NM = 550.0
BLUE_NM = 460.0
NIR_NM = 880.0
MIR_NM = 1240.0

REFERENCE_SIGNATURE = "ch4_signature.txt"


@dataclass(frozen=True)
class BandRange:
    """Contiguous band index range [lo_index, hi_index] inside [lo_nm, hi_nm]."""

    lo_index: int
    hi_index: int
    lo_nm: float
    hi_nm: float

    @property
    def count(self) -> int:
        return self.hi_index - self.lo_index + 1

    @property
    def slice(self) -> tuple[int, int]:
        return (self.lo_index, self.hi_index + 1)


@dataclass
class IndexMap:
    """Scalar normalized-difference field with a validity mask."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.values.shape


@dataclass
class TargetSignature:
    """Per-band radiance change caused by a unit mixing ratio of CH4."""

    values: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        if self.values.shape != self.wavelengths.shape:
            raise MalformedTable("signature values and wavelengths differ in length")
        if not np.any(self.values):
            raise AllZeroSignature("target signature is identically zero")


def select_bands(meta: CubeMeta, lo_nm: float, hi_nm: float) -> BandRange:
    """Maximal contiguous band range with wavelengths inside [lo_nm, hi_nm]."""
    wl = meta.wavelengths
    inside = np.nonzero((wl >= lo_nm) & (wl <= hi_nm))[0]
    if inside.size == 0:
        raise EmptySelection(f"no band inside [{lo_nm}, {hi_nm}] nm")
    return BandRange(lo_index=int(inside[0]), hi_index=int(inside[-1]),
                     lo_nm=lo_nm, hi_nm=hi_nm)


def gaussian_weights(wavelengths: np.ndarray, center_nm: float,
                     sigma_nm: float) -> np.ndarray:
    d = np.asarray(wavelengths, dtype=float) - center_nm
    return np.exp(-0.5 * (d / sigma_nm) ** 2)


def weighted_band_average(block: np.ndarray, wavelengths: np.ndarray,
                          center_nm: float, sigma_nm: float) -> np.ndarray:
    """Gaussian-weighted mean over the band axis (last axis of ``block``)."""
    w = gaussian_weights(wavelengths, center_nm, sigma_nm)
    total = w.sum()
    if total <= 0:
        raise EmptySelection(f"no usable band near {center_nm} nm")
    return block @ (w / total)


def _read_window(cube: HyperCube, centers: list[float], sigma_nm: float,
                 reach: float = 4.0, rows=None, cols=None):
    """Read the band window spanning all centers +- reach*sigma."""
    wl = cube.meta.wavelengths
    lo = min(centers) - reach * sigma_nm
    hi = max(centers) + reach * sigma_nm
    rng = select_bands(cube.meta, max(lo, wl[0]), min(hi, wl[-1]))
    rows = rows if rows is not None else (0, cube.meta.height)
    cols = cols if cols is not None else (0, cube.meta.width)
    block, valid = cube.read_block(rows, cols, rng.slice)
    return block, np.all(valid, axis=2), wl[rng.lo_index:rng.hi_index + 1]


def compose_rgb(cube: HyperCube, rows=None, cols=None):
    """Render a 3-channel image from the visible bands.

    Each channel is a Gaussian-weighted band average centered at its nominal
    color wavelength. Returns (rgb, valid) with rgb shaped (H, W, 3).
    """
    centers = [RED_NM, GREEN_NM, BLUE_NM]
    block, valid, wl = _read_window(cube, centers, RGB_SIGMA_NM,
                                    rows=rows, cols=cols)
    channels = [weighted_band_average(block, wl, c, RGB_SIGMA_NM) for c in centers]
    rgb = np.stack(channels, axis=-1)
    rgb[~valid] = 0.0
    return rgb, valid


def _normalized_difference(cube: HyperCube, plus_nm: float, minus_nm: float) -> IndexMap:
    block, valid, wl = _read_window(cube, [plus_nm, minus_nm], INDEX_SIGMA_NM)
    a = weighted_band_average(block, wl, plus_nm, INDEX_SIGMA_NM)
    b = weighted_band_average(block, wl, minus_nm, INDEX_SIGMA_NM)
    denom = a + b
    ok = valid & (denom > 0)
    values = np.zeros_like(denom)
    np.divide(a - b, denom, out=values, where=ok)
    return IndexMap(values=values, valid=ok)


def ndvi(cube: HyperCube) -> IndexMap:
    """(NIR - R) / (NIR + R) with NIR at 880 nm and R at 660 nm."""
    return _normalized_difference(cube, NIR_NM, RED_NM)


def ndwi(cube: HyperCube) -> IndexMap:
    """(NIR - MIR) / (NIR + MIR) with MIR at 1240 nm."""
    return _normalized_difference(cube, NIR_NM, MIR_NM)


def parse_signature_table(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse a two-column (wavelength_nm, coefficient) table.

    Lines starting with '#' are comments. Rows are sorted by wavelength.
    """
    wl, vals = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise MalformedTable(f"line {lineno}: expected 2 columns, got {len(parts)}")
        try:
            wl.append(float(parts[0]))
            vals.append(float(parts[1]))
        except ValueError as exc:
            raise MalformedTable(f"line {lineno}: {exc}") from exc
    if len(wl) < 2:
        raise MalformedTable("signature table needs at least 2 rows")
    order = np.argsort(wl)
    return np.asarray(wl, float)[order], np.asarray(vals, float)[order]


def load_target_signature(source, meta: CubeMeta) -> TargetSignature:
    """Resample a signature table onto the cube's wavelength grid.

    ``source`` is a path, file object, or raw table text. Linear interpolation
    inside the table's support, zero outside.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = str(source)
        if "\n" not in text and len(text) < 4096:
            path = Path(text)
            if path.exists():
                text = path.read_text()
    table_wl, table_vals = parse_signature_table(text)
    values = np.interp(meta.wavelengths, table_wl, table_vals, left=0.0, right=0.0)
    if not np.any(values):
        raise AllZeroSignature(
            "signature support does not intersect the cube wavelength grid"
        )
    return TargetSignature(values=values, wavelengths=meta.wavelengths.copy())


def reference_signature_text() -> str:
    """Raw text of the packaged CH4 absorption table."""
    return resources.files("plumekit.data").joinpath(REFERENCE_SIGNATURE).read_text()


def load_reference_signature(meta: CubeMeta) -> TargetSignature:
    """Packaged CH4 signature resampled onto the cube grid."""
    return load_target_signature(io.StringIO(reference_signature_text()), meta)
