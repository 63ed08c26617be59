"""Seeded synthetic flightline generator for self-contained runs and tests.

The scene holds two terrains stacked along the rows: a noisy, spectrally flat
soil-like background on top and a quiet vegetation-like background below,
with distinct means and covariances so class-aware whitening has something to
win on. An optional plume adds a scaled copy of the CH4 signature over an
elliptical blob inside the vegetation half. Column windows cut across both
terrains, which is exactly the regime where pooled column statistics wash
out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import annotate, hsi_io
from .spectra import TargetSignature, load_reference_signature
from .hsi_io import CubeMeta


@dataclass
class SyntheticScene:
    radiance: np.ndarray       # (H, W, N) float64
    wavelengths: np.ndarray
    terrain: np.ndarray        # (H, W) 0 = soil-like, 1 = vegetation-like
    plume_mask: np.ndarray     # (H, W) bool
    plume_box: np.ndarray      # (cx, cy, w, h) normalized, zeros when absent
    plume_amplitude: float
    signature: TargetSignature
    seed: int

    def cube(self) -> hsi_io.HyperCube:
        return hsi_io.HyperCube.from_array(self.radiance, self.wavelengths)


def _soil_spectrum(wl):
    return 5.0 + 0.4 * np.sin(wl / 400.0)


def _vegetation_spectrum(wl):
    knots_nm = [380, 550, 660, 705, 750, 880, 1240, 1500, 2000, 2535]
    knots_val = [1.2, 1.6, 0.9, 3.0, 7.5, 8.0, 6.8, 4.0, 2.8, 2.2]
    return np.interp(wl, knots_nm, knots_val)


def _smooth_direction(wl, period_nm, rng):
    phase = rng.uniform(0, 2 * np.pi)
    vec = np.sin(wl / period_nm + phase)
    return vec / np.linalg.norm(vec)


def make_scene(height: int = 128, width: int = 128, bands: int = 48,
               seed: int = 0, plume_amplitude: float = 1.5,
               with_plume: bool = True) -> SyntheticScene:
    """Deterministic two-terrain scene with an optional injected plume."""
    rng = np.random.default_rng(seed)
    wl = np.linspace(380.0, 2510.0, bands)
    meta = CubeMeta(height=height, width=width, bands=bands, wavelengths=wl)
    signature = load_reference_signature(meta)

    half = height // 2
    mu_soil = _soil_spectrum(wl)
    mu_veg = _vegetation_spectrum(wl)
    sigma_soil, sigma_veg = 0.55, 0.12
    dir_soil = _smooth_direction(wl, 350.0, rng)
    dir_veg = _smooth_direction(wl, 500.0, rng)

    data = np.empty((height, width, bands))
    data[:half] = (mu_soil
                   + rng.normal(0, sigma_soil, size=(half, width, bands))
                   + rng.normal(0, 0.35, size=(half, width, 1)) * dir_soil)
    data[half:] = (mu_veg
                   + rng.normal(0, sigma_veg, size=(height - half, width, bands))
                   + rng.normal(0, 0.06, size=(height - half, width, 1)) * dir_veg)

    terrain = np.zeros((height, width), dtype=np.int32)
    terrain[half:] = 1

    plume_mask = np.zeros((height, width), dtype=bool)
    plume_box = np.zeros(4)
    if with_plume:
        cy = half + (height - half) // 2
        cx = width // 2
        ry = max((height - half) // 6, 2)
        rx = max(width // 8, 2)
        rows, cols = np.ogrid[:height, :width]
        plume_mask = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        data[plume_mask] += plume_amplitude * signature.values
        plume_box = np.array([cx / width, cy / height,
                              2 * rx / width, 2 * ry / height])

    return SyntheticScene(radiance=data, wavelengths=wl, terrain=terrain,
                          plume_mask=plume_mask, plume_box=plume_box,
                          plume_amplitude=plume_amplitude if with_plume else 0.0,
                          signature=signature, seed=seed)


def identity_glt(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Straight-flight lookup: sensor column tracks the image column."""
    cols = (np.arange(width, dtype=np.int32) % hsi_io.SENSOR_COLUMNS) + 1
    orig_col = np.tile(cols[None, :], (height, 1))
    orig_row = np.tile(np.arange(1, height + 1, dtype=np.int32)[:, None], (1, width))
    return orig_col, orig_row


def write_scene(scene: SyntheticScene, outdir) -> dict:
    """Write cube, GLT, ground truth and provenance; returns the paths."""
    from PIL import Image

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    height, width, _ = scene.radiance.shape

    cube_hdr, cube_img = hsi_io.write_cube(outdir / "cube", scene.radiance,
                                           scene.wavelengths, data_type="float32")
    glt_hdr, glt_img = hsi_io.write_glt(outdir / "glt",
                                        *identity_glt(height, width))

    gt = {
        "schema": "plumekit.groundtruth/1",
        "seed": scene.seed,
        "plume_amplitude": scene.plume_amplitude,
        "boxes": ([{"box": [float(v) for v in scene.plume_box],
                    "class": "point_source"}]
                  if scene.plume_mask.any() else []),
    }
    gt_path = outdir / "groundtruth.json"
    gt_path.write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n")

    mask_img = annotate.encode_mask(scene.plume_mask.astype(float),
                                    annotate.POINT_SOURCE)
    mask_path = outdir / "groundtruth_mask.png"
    Image.fromarray(mask_img, mode="RGB").save(mask_path, format="PNG")

    return {"cube_header": cube_hdr, "cube_data": cube_img,
            "glt_header": glt_hdr, "glt_data": glt_img,
            "groundtruth": gt_path, "groundtruth_mask": mask_path}
