"""Map expert annotation patches into flightline pixel space.

A homography estimated from point correspondences (patch corners matched to
flightline pixels) warps each concentration patch onto the flightline grid by
nearest-neighbor resampling, after which plumes are color-coded into the
3-channel mask convention: red for point sources, blue for diffused sources.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    InsufficientPairs,
    NonInvertibleHomography,
)

POINT_SOURCE = "point"
DIFFUSED_SOURCE = "diffused"
SOURCE_COLORS = {POINT_SOURCE: (255, 0, 0), DIFFUSED_SOURCE: (0, 0, 255)}


@dataclass
class Homography:
    """3x3 projective matrix mapping (x, y) points, normalized so H[2,2] = 1."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.shape != (3, 3):
            raise NonInvertibleHomography(f"matrix shape {self.matrix.shape}")
        if abs(np.linalg.det(self.matrix)) < 1e-12:
            raise NonInvertibleHomography("homography is numerically singular")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 2) points given as (x, y) = (col, row)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        homog = np.column_stack([pts, np.ones(len(pts))])
        mapped = homog @ self.matrix.T
        return mapped[:, :2] / mapped[:, 2:3]

    def inverse(self) -> "Homography":
        inv = np.linalg.inv(self.matrix)
        return Homography(inv / inv[2, 2])


@dataclass
class AnnotationPatch:
    """Concentration values with the geographic corners of the patch footprint.

    Corners are (x, y) pairs ordered (top-left, top-right, bottom-right,
    bottom-left) matching pixel corners (0,0), (W-1,0), (W-1,H-1), (0,H-1).
    """

    values: np.ndarray
    corners_geo: np.ndarray
    source_type: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.corners_geo = np.asarray(self.corners_geo, dtype=float)
        if self.values.ndim != 2 or np.any(self.values < 0):
            raise ValueError("patch values must be a non-negative 2-D grid")
        if self.corners_geo.shape != (4, 2):
            raise ValueError("expected 4 corner coordinates")
        if self.source_type not in SOURCE_COLORS:
            raise ValueError(f"unknown source type '{self.source_type}'")

    def pixel_corners(self) -> np.ndarray:
        h, w = self.values.shape
        return np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], float)


def _normalization(points: np.ndarray) -> np.ndarray:
    """Similarity transform bringing points to zero centroid, sqrt(2) RMS."""
    centroid = points.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((points - centroid) ** 2, axis=1)))
    scale = np.sqrt(2.0) / rms if rms > 0 else 1.0
    return np.array([[scale, 0, -scale * centroid[0]],
                     [0, scale, -scale * centroid[1]],
                     [0, 0, 1.0]])


def _collinear(p, q, r, tol=1e-9) -> bool:
    area = (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    span = max(np.abs([q - p, r - p]).max(), 1.0)
    return abs(area) <= tol * span * span


def estimate_homography(src_points, dst_points) -> tuple[Homography, float]:
    """Direct linear transform from >= 4 (x, y) correspondences.

    Returns the homography and the reprojection RMS over the input pairs.
    Uses isotropic normalization of both point sets for conditioning.
    """
    src = np.asarray(src_points, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst_points, dtype=float).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 4:
        raise InsufficientPairs(f"need >= 4 pairs, got {src.shape[0]}")
    n = src.shape[0]
    if n == 4:
        for skip in range(4):
            trio = [i for i in range(4) if i != skip]
            if _collinear(src[trio[0]], src[trio[1]], src[trio[2]]):
                raise DegenerateConfiguration("3 of 4 source points are collinear")

    t_src = _normalization(src)
    t_dst = _normalization(dst)
    sn = (np.column_stack([src, np.ones(n)]) @ t_src.T)[:, :2]
    dn = (np.column_stack([dst, np.ones(n)]) @ t_dst.T)[:, :2]

    rows = []
    for (x, y), (u, v) in zip(sn, dn):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    a = np.asarray(rows)
    _, s, vt = np.linalg.svd(a)
    if s[7] <= 1e-9 * s[0]:
        raise DegenerateConfiguration("correspondences do not constrain a homography")
    h_norm = vt[-1].reshape(3, 3)
    matrix = np.linalg.inv(t_dst) @ h_norm @ t_src
    if abs(matrix[2, 2]) < 1e-12:
        raise NonInvertibleHomography("homography has a vanishing scale term")
    matrix = matrix / matrix[2, 2]
    homography = Homography(matrix)
    residual = homography.apply(src) - dst
    rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
    return homography, rms


def homography_for_patch(patch: AnnotationPatch, flightline_points) -> tuple[Homography, float]:
    """Homography from patch pixel corners to matched flightline pixels."""
    return estimate_homography(patch.pixel_corners(), flightline_points)


def warp_mask(values: np.ndarray, h: Homography, target_shape) -> np.ndarray:
    """Resample a patch onto the target grid by nearest-neighbor inverse mapping.

    Pixel (r, c) owns the continuous square [c, c+1) x [r, r+1). Each target
    pixel center is inverse-mapped and takes the source pixel containing it;
    a source pixel may land in many target pixels under upscaling. Outside
    the warped footprint the layer stays zero.
    """
    values = np.asarray(values, dtype=float)
    height, width = target_shape
    inv = h.inverse().matrix

    # restrict work to the warped footprint's bounding box
    src_h, src_w = values.shape
    corners = np.array([[0.0, 0.0], [src_w, 0.0], [src_w, src_h], [0.0, src_h]])
    warped = h.apply(corners)
    x0 = max(int(np.floor(warped[:, 0].min())) - 1, 0)
    x1 = min(int(np.ceil(warped[:, 0].max())) + 1, width)
    y0 = max(int(np.floor(warped[:, 1].min())) - 1, 0)
    y1 = min(int(np.ceil(warped[:, 1].max())) + 1, height)
    out = np.zeros((height, width), dtype=float)
    if x1 <= x0 or y1 <= y0:
        return out

    xs, ys = np.meshgrid(np.arange(x0, x1, dtype=float) + 0.5,
                         np.arange(y0, y1, dtype=float) + 0.5)
    homog = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    mapped = homog @ inv.T
    sx = mapped[..., 0] / mapped[..., 2]
    sy = mapped[..., 1] / mapped[..., 2]
    col = np.floor(sx).astype(int)
    row = np.floor(sy).astype(int)
    inside = (row >= 0) & (row < src_h) & (col >= 0) & (col < src_w)
    window = out[y0:y1, x0:x1]
    window[inside] = values[row[inside], col[inside]]
    return out


def encode_mask(concentration: np.ndarray, source_type: str) -> np.ndarray:
    """Color-code a concentration layer into a 3-channel uint8 mask."""
    color = SOURCE_COLORS[source_type]
    concentration = np.asarray(concentration)
    img = np.zeros(concentration.shape + (3,), dtype=np.uint8)
    img[concentration > 0] = color
    return img


def composite_masks(layers) -> np.ndarray:
    """Merge (concentration, source_type) layers; point sources win conflicts."""
    layers = list(layers)
    if not layers:
        raise ValueError("no layers to composite")
    shape = np.asarray(layers[0][0]).shape
    img = np.zeros(shape + (3,), dtype=np.uint8)
    for concentration, source_type in layers:
        if source_type == POINT_SOURCE:
            continue
        img[np.asarray(concentration) > 0] = SOURCE_COLORS[source_type]
    for concentration, source_type in layers:
        if source_type != POINT_SOURCE:
            continue
        img[np.asarray(concentration) > 0] = SOURCE_COLORS[source_type]
    return img


def composite_concentrations(layers) -> np.ndarray:
    """Merge concentration layers by per-pixel max."""
    layers = [np.asarray(values, dtype=float) for values, _ in layers]
    out = np.zeros_like(layers[0])
    for values in layers:
        np.maximum(out, values, out=out)
    return out


def save_patch(path_stem, patch: AnnotationPatch) -> None:
    from .serialize import save_arrays

    save_arrays(path_stem, {"values": patch.values,
                            "corners_geo": patch.corners_geo,
                            "source_type": np.array(patch.source_type)})


def load_patch(path_stem) -> AnnotationPatch:
    from .serialize import load_arrays

    data = load_arrays(path_stem)
    return AnnotationPatch(values=data["values"],
                           corners_geo=data["corners_geo"],
                           source_type=str(data["source_type"].item()))


@dataclass
class GeoGrid:
    """Affine georeference: pixel (row, col) -> geographic (x, y).

    x = x0 + col * dx, y = y0 + row * dy (dy typically negative for
    north-up rasters).
    """

    x0: float
    y0: float
    dx: float
    dy: float

    def to_pixel(self, xy: np.ndarray) -> np.ndarray:
        """Geographic points -> fractional (x=col, y=row) pixel coordinates."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        col = (xy[:, 0] - self.x0) / self.dx
        row = (xy[:, 1] - self.y0) / self.dy
        return np.column_stack([col, row])

    def snap(self, xy: np.ndarray) -> np.ndarray:
        """Nearest-grid-point pixel coordinates for geographic points."""
        return np.round(self.to_pixel(xy))
