"""ENVI-style header parsing, BIL cube access, lookup tables and tile planning.

All rasters handled here are Band Interleaved by Line: the binary file is
indexed first by image row, then by band, then by image column, little-endian.
Radiance is promoted to float64 on read; pixels equal to the no-data sentinel
are flagged invalid and must be excluded from downstream statistics.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InvalidGeometry,
    IoFailure,
    MalformedWavelengthList,
    MissingField,
    OutOfBounds,
    UnsupportedDataType,
    UnsupportedInterleave,
)

# AVIRIS-NG style no-data fill used by orthorectification.
DEFAULT_NO_DATA = -9999.0

# Push-broom detector width; valid 1-based sensor column indices in a GLT.
SENSOR_COLUMNS = 598

_ENVI_DTYPES = {
    "2": "int16",
    "4": "float32",
    "5": "float64",
    "int16": "int16",
    "float32": "float32",
    "float64": "float64",
}

_NUMPY_DTYPES = {
    "int16": np.dtype("<i2"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}

_ENVI_DTYPE_CODES = {"int16": 2, "float32": 4, "float64": 5}


@dataclass
class CubeMeta:
    """Dimensions and wavelength grid of a BIL radiance cube."""

    height: int
    width: int
    bands: int
    wavelengths: np.ndarray
    interleave: str = "bil"
    data_type: str = "float32"
    no_data_value: float = DEFAULT_NO_DATA
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0 or self.bands <= 0:
            raise MissingField("cube dimensions must be positive")
        self.wavelengths = np.asarray(self.wavelengths, dtype=float)
        if self.wavelengths.size:
            if self.wavelengths.size != self.bands:
                raise MalformedWavelengthList(
                    f"{self.wavelengths.size} wavelengths for {self.bands} bands"
                )
            if np.any(np.diff(self.wavelengths) <= 0):
                raise MalformedWavelengthList("wavelengths not strictly increasing")


def _split_braced_list(value: str) -> list[str]:
    inner = value.strip()
    if inner.startswith("{"):
        inner = inner[1:]
    if inner.endswith("}"):
        inner = inner[:-1]
    return [tok.strip() for tok in re.split(r"[,\s]+", inner) if tok.strip()]


def parse_header_fields(text: str) -> dict:
    """Parse raw ``key = value`` header text into a lowercase-keyed dict.

    Braced values may span multiple lines. Unknown keys are kept verbatim so
    callers can pick what they need.
    """
    fields: dict[str, str] = {}
    pending_key = None
    pending: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.upper() == "ENVI" or line.startswith(";"):
            continue
        if pending_key is not None:
            pending.append(line)
            if "}" in line:
                fields[pending_key] = " ".join(pending)
                pending_key, pending = None, []
            continue
        if "=" not in line:
            continue
        key, value = line.split("=", 1)
        key = key.strip().lower()
        value = value.strip()
        if value.startswith("{") and "}" not in value:
            pending_key, pending = key, [value]
        else:
            fields[key] = value
    if pending_key is not None:
        raise MalformedWavelengthList(f"unterminated braced value for '{pending_key}'")
    return fields


def parse_envi_header(text: str) -> CubeMeta:
    """Build a CubeMeta from header text.

    Required keys: samples, lines, bands, interleave, wavelength. ``data type``
    defaults to float32, ``data ignore value`` to the AVIRIS-NG fill of -9999.
    """
    fields = parse_header_fields(text)

    for key in ("samples", "lines", "bands", "interleave", "wavelength"):
        if key not in fields:
            raise MissingField(f"header missing '{key}'")

    interleave = fields["interleave"].strip().lower()
    if interleave != "bil":
        raise UnsupportedInterleave(f"interleave '{interleave}' not supported, expected bil")

    try:
        width = int(fields["samples"])
        height = int(fields["lines"])
        bands = int(fields["bands"])
    except ValueError as exc:
        raise MissingField(f"non-integer dimension field: {exc}") from exc

    dtype_token = fields.get("data type", "float32").strip().lower()
    if dtype_token not in _ENVI_DTYPES:
        raise UnsupportedDataType(f"data type '{dtype_token}' not supported")
    data_type = _ENVI_DTYPES[dtype_token]

    tokens = _split_braced_list(fields["wavelength"])
    try:
        wavelengths = np.array([float(tok) for tok in tokens], dtype=float)
    except ValueError as exc:
        raise MalformedWavelengthList(str(exc)) from exc
    if wavelengths.size != bands:
        raise MalformedWavelengthList(
            f"{wavelengths.size} wavelengths for {bands} bands"
        )

    no_data = DEFAULT_NO_DATA
    if "data ignore value" in fields:
        try:
            no_data = float(fields["data ignore value"])
        except ValueError as exc:
            raise MalformedWavelengthList(f"bad data ignore value: {exc}") from exc

    known = {"samples", "lines", "bands", "interleave", "wavelength",
             "data type", "data ignore value", "byte order"}
    extra = {k: v for k, v in fields.items() if k not in known}

    if fields.get("byte order", "0").strip() not in ("0", ""):
        raise IoFailure("big-endian rasters are not supported")

    return CubeMeta(
        height=height,
        width=width,
        bands=bands,
        wavelengths=wavelengths,
        interleave="bil",
        data_type=data_type,
        no_data_value=no_data,
        extra=extra,
    )


class HyperCube:
    """Windowed random access to a BIL radiance cube.

    The backing is either a read-only memory map or an in-memory array, both
    stored in source order (row, band, column). Reads are safe from multiple
    threads.
    """

    def __init__(self, meta: CubeMeta, data_rbc: np.ndarray):
        expected = (meta.height, meta.bands, meta.width)
        if data_rbc.shape != expected:
            raise IoFailure(f"backing shape {data_rbc.shape} != header {expected}")
        self.meta = meta
        self._data = data_rbc

    @classmethod
    def from_array(cls, data_hwb: np.ndarray, wavelengths,
                   no_data: float = DEFAULT_NO_DATA) -> "HyperCube":
        """Wrap an in-memory (height, width, bands) array as a cube."""
        data_hwb = np.asarray(data_hwb)
        if data_hwb.ndim != 3:
            raise IoFailure("expected a (height, width, bands) array")
        h, w, b = data_hwb.shape
        meta = CubeMeta(height=h, width=w, bands=b, wavelengths=wavelengths,
                        data_type="float64", no_data_value=no_data)
        return cls(meta, np.ascontiguousarray(data_hwb.transpose(0, 2, 1)))

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.meta.height, self.meta.width, self.meta.bands)

    def read_block(self, rows: tuple[int, int], cols: tuple[int, int],
                   bands: tuple[int, int] | None = None):
        """Read a dense window as float64, laid out (row, col, band).

        Returns ``(block, valid)`` where ``valid`` flags entries different
        from the no-data sentinel. Half-open ranges.
        """
        r0, r1 = rows
        c0, c1 = cols
        b0, b1 = bands if bands is not None else (0, self.meta.bands)
        if not (0 <= r0 < r1 <= self.meta.height):
            raise OutOfBounds(f"row range {rows} outside [0, {self.meta.height})")
        if not (0 <= c0 < c1 <= self.meta.width):
            raise OutOfBounds(f"col range {cols} outside [0, {self.meta.width})")
        if not (0 <= b0 < b1 <= self.meta.bands):
            raise OutOfBounds(f"band range {bands} outside [0, {self.meta.bands})")
        try:
            raw = self._data[r0:r1, b0:b1, c0:c1]
        except (ValueError, OSError) as exc:
            raise IoFailure(str(exc)) from exc
        block = np.asarray(raw, dtype=np.float64).transpose(0, 2, 1)
        valid = block != self.meta.no_data_value
        return block, valid

    def read_pixel(self, row: int, col: int) -> np.ndarray:
        """Full spectrum of one pixel as float64."""
        block, _ = self.read_block((row, row + 1), (col, col + 1))
        return block[0, 0]

    def valid_mask(self, rows: tuple[int, int] | None = None,
                   cols: tuple[int, int] | None = None) -> np.ndarray:
        """Per-pixel validity: every band differs from the sentinel."""
        rows = rows if rows is not None else (0, self.meta.height)
        cols = cols if cols is not None else (0, self.meta.width)
        _, valid = self.read_block(rows, cols)
        return np.all(valid, axis=2)


def open_cube(header_path, data_path=None, no_data: float | None = None) -> HyperCube:
    """Memory-map a cube given its header path.

    ``data_path`` defaults to the header path without the ``.hdr`` suffix.
    ``no_data`` overrides the header's ignore value.
    """
    header_path = Path(header_path)
    if data_path is None:
        candidates = [header_path.with_suffix(".img"), header_path.with_suffix("")]
        data_path = next((p for p in candidates if p.exists() and p != header_path),
                         candidates[0])
    data_path = Path(data_path)
    try:
        meta = parse_envi_header(header_path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read header {header_path}: {exc}") from exc
    if no_data is not None:
        meta.no_data_value = float(no_data)
    dtype = _NUMPY_DTYPES[meta.data_type]
    expected_bytes = meta.height * meta.bands * meta.width * dtype.itemsize
    try:
        actual = data_path.stat().st_size
    except OSError as exc:
        raise IoFailure(f"cannot stat {data_path}: {exc}") from exc
    if actual < expected_bytes:
        raise IoFailure(
            f"{data_path} holds {actual} bytes, header implies {expected_bytes}"
        )
    mm = np.memmap(data_path, dtype=dtype, mode="r",
                   shape=(meta.height, meta.bands, meta.width))
    return HyperCube(meta, mm)


def _format_header(height, width, bands, data_type, wavelengths=None,
                   no_data=None, extra=None) -> str:
    lines = [
        "ENVI",
        f"samples = {width}",
        f"lines = {height}",
        f"bands = {bands}",
        "interleave = bil",
        f"data type = {_ENVI_DTYPE_CODES[data_type]}",
        "byte order = 0",
    ]
    if no_data is not None:
        lines.append(f"data ignore value = {no_data}")
    if wavelengths is not None and len(wavelengths):
        wl = ", ".join(f"{w:.6g}" for w in wavelengths)
        lines.append("wavelength = { " + wl + " }")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_cube(path_stem, data_hwb: np.ndarray, wavelengths,
               data_type: str = "float32", no_data: float = DEFAULT_NO_DATA,
               extra: dict | None = None) -> tuple[Path, Path]:
    """Write a (height, width, bands) array as BIL binary + header.

    Returns (header_path, data_path).
    """
    if data_type not in _NUMPY_DTYPES:
        raise UnsupportedDataType(data_type)
    data_hwb = np.asarray(data_hwb)
    h, w, b = data_hwb.shape
    stem = Path(path_stem)
    data_path = stem.with_suffix(".img")
    header_path = stem.with_suffix(".hdr")
    bil = np.ascontiguousarray(
        data_hwb.transpose(0, 2, 1), dtype=_NUMPY_DTYPES[data_type]
    )
    data_path.write_bytes(bil.tobytes())
    header_path.write_text(
        _format_header(h, w, b, data_type, wavelengths, no_data, extra)
    )
    return header_path, data_path


def write_scalar_map(path_stem, values: np.ndarray, no_data: float = DEFAULT_NO_DATA,
                     extra: dict | None = None) -> tuple[Path, Path]:
    """Write a single-band float32 map (BIL with one band) + header."""
    values = np.asarray(values, dtype=np.float32)
    return write_cube(path_stem, values[:, :, None], wavelengths=[],
                      data_type="float32", no_data=no_data, extra=extra)


def read_scalar_map(header_path, data_path=None):
    """Read back a single-band float map written by write_scalar_map."""
    header_path = Path(header_path)
    if data_path is None:
        data_path = header_path.with_suffix(".img")
    fields = parse_header_fields(Path(header_path).read_text())
    for key in ("samples", "lines", "bands"):
        if key not in fields:
            raise MissingField(f"header missing '{key}'")
    h, w, b = int(fields["lines"]), int(fields["samples"]), int(fields["bands"])
    if b != 1:
        raise IoFailure(f"expected a single-band map, got {b} bands")
    dtype_token = fields.get("data type", "4").strip().lower()
    if dtype_token not in _ENVI_DTYPES:
        raise UnsupportedDataType(dtype_token)
    dtype = _NUMPY_DTYPES[_ENVI_DTYPES[dtype_token]]
    raw = np.fromfile(data_path, dtype=dtype)
    if raw.size != h * w:
        raise IoFailure(f"{data_path}: {raw.size} samples, expected {h * w}")
    no_data = float(fields.get("data ignore value", DEFAULT_NO_DATA))
    values = raw.reshape(h, w).astype(np.float64)
    return values, no_data


@dataclass
class GltMap:
    """Geometric lookup table: ortho pixel -> raw sensor (row, column).

    Index 0 means unmapped; columns are 1-based sensor indices up to 598.
    """

    orig_col: np.ndarray
    orig_row: np.ndarray

    def __post_init__(self):
        if self.orig_col.shape != self.orig_row.shape:
            raise IoFailure("GLT band shapes disagree")
        if self.orig_col.min() < 0 or self.orig_col.max() > SENSOR_COLUMNS:
            raise OutOfBounds(
                f"GLT sensor columns outside [0, {SENSOR_COLUMNS}]"
            )

    @property
    def shape(self):
        return self.orig_col.shape

    @property
    def mapped(self) -> np.ndarray:
        return self.orig_col > 0


def read_glt(header_path, data_path=None) -> GltMap:
    """Read a 2-band int16 BIL lookup table (band 1 = column, band 2 = row)."""
    header_path = Path(header_path)
    if data_path is None:
        data_path = header_path.with_suffix(".img")
    fields = parse_header_fields(header_path.read_text())
    for key in ("samples", "lines", "bands"):
        if key not in fields:
            raise MissingField(f"GLT header missing '{key}'")
    if fields.get("interleave", "bil").strip().lower() != "bil":
        raise UnsupportedInterleave("GLT must be BIL")
    h, w, b = int(fields["lines"]), int(fields["samples"]), int(fields["bands"])
    if b != 2:
        raise IoFailure(f"GLT must have 2 bands, got {b}")
    raw = np.fromfile(data_path, dtype=np.dtype("<i2"))
    if raw.size != h * 2 * w:
        raise IoFailure(f"GLT size mismatch: {raw.size} != {h * 2 * w}")
    cube = raw.reshape(h, 2, w)
    return GltMap(orig_col=cube[:, 0, :].astype(np.int32),
                  orig_row=cube[:, 1, :].astype(np.int32))


def write_glt(path_stem, orig_col: np.ndarray, orig_row: np.ndarray,
              extra: dict | None = None) -> tuple[Path, Path]:
    """Write a GLT as 2-band int16 BIL + header."""
    h, w = orig_col.shape
    stem = Path(path_stem)
    data_path = stem.with_suffix(".img")
    header_path = stem.with_suffix(".hdr")
    cube = np.stack([orig_col, orig_row], axis=1).astype(np.dtype("<i2"))
    data_path.write_bytes(np.ascontiguousarray(cube).tobytes())
    header_path.write_text(_format_header(h, w, 2, "int16", extra=extra))
    return header_path, data_path


@dataclass(frozen=True)
class TileRect:
    """A square tile anchored at (row0, col0)."""

    row0: int
    col0: int
    size: int

    @property
    def rows(self) -> tuple[int, int]:
        return (self.row0, self.row0 + self.size)

    @property
    def cols(self) -> tuple[int, int]:
        return (self.col0, self.col0 + self.size)


def _axis_origins(extent: int, size: int, stride: int) -> list[int]:
    origins = []
    pos = 0
    while True:
        if pos + size >= extent:
            origins.append(extent - size)
            break
        origins.append(pos)
        pos += stride
    return origins


def plan_tiles(height: int, width: int, size: int, overlap: int) -> list[TileRect]:
    """Plan a covering grid of square tiles with the given overlap.

    Consecutive origins step by ``size - overlap``; the trailing tile on each
    axis is clamped to the image edge (shifted inward, never padded).
    """
    if size <= 0 or overlap < 0 or overlap >= size:
        raise InvalidGeometry(f"need 0 <= overlap < size, got size={size} overlap={overlap}")
    if size > height or size > width:
        raise InvalidGeometry(f"tile size {size} exceeds image {height}x{width}")
    stride = size - overlap
    rows = _axis_origins(height, size, stride)
    cols = _axis_origins(width, size, stride)
    return [TileRect(r, c, size) for r in rows for c in cols]
