"""Command-line pipeline: synth, enhance, tile, detect, annotate-map, eval, plot.

Every output artifact embeds the config hash and seed; timestamps live only
in ``*.sidecar.json`` files so reruns with identical configuration are byte
identical. Exit codes: 0 success, 1 internal error, 2 user/input error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import annotate, hsi_io, landcover, matchloss, slf, spectra, synth
from .detector import Detector, DetectorConfig
from .errors import BadGeometry, EmptyGroundTruth, MissingField, PlumekitError

SENTINEL_RGB = (255, 0, 255)


def _config_hash(params: dict) -> str:
    canon = json.dumps(params, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _write_sidecar(outdir: Path, name: str) -> None:
    _write_json(outdir / f"{name}.sidecar.json",
                {"written_utc": datetime.now(timezone.utc).isoformat()})


def render_scalar_png(values: np.ndarray, valid: np.ndarray):
    """Affine-scaled grayscale with a sentinel color for invalid pixels."""
    finite = np.asarray(valid, bool) & np.isfinite(values)
    gray = np.zeros(values.shape, dtype=np.uint8)
    if finite.any():
        vmin = float(values[finite].min())
        vmax = float(values[finite].max())
        span = (vmax - vmin) or 1.0
        gray[finite] = np.round(255.0 * (values[finite] - vmin) / span).astype(np.uint8)
    else:
        vmin = vmax = 0.0
    rgb = np.stack([gray] * 3, axis=-1)
    rgb[~finite] = SENTINEL_RGB
    scale = {"vmin": vmin, "vmax": vmax, "gray_levels": 256,
             "invalid_color": list(SENTINEL_RGB)}
    return rgb, scale


def _save_png(path: Path, array: np.ndarray, mode: str) -> None:
    from PIL import Image

    Image.fromarray(array, mode=mode).save(path, format="PNG")


def _load_signature(args, meta):
    if args.signature:
        return spectra.load_target_signature(Path(args.signature), meta)
    return spectra.load_reference_signature(meta)


# --- subcommands ---

def cmd_synth(args) -> int:
    params = {"height": args.height, "width": args.width, "bands": args.bands,
              "seed": args.seed, "plume_amplitude": args.plume_amplitude,
              "with_plume": not args.no_plume}
    scene = synth.make_scene(height=args.height, width=args.width,
                             bands=args.bands, seed=args.seed,
                             plume_amplitude=args.plume_amplitude,
                             with_plume=not args.no_plume)
    outdir = Path(args.out)
    paths = synth.write_scene(scene, outdir)
    _write_json(outdir / "synth.json",
                {"schema": "plumekit.synth/1", "config_hash": _config_hash(params),
                 "seed": args.seed, "params": params})
    _write_sidecar(outdir, "synth")
    print(f"wrote synthetic scene to {outdir} "
          f"({args.height}x{args.width}x{args.bands})")
    return 0


def _enhance_params(args) -> dict:
    return {"filter": args.filter, "column_window": args.column_window,
            "eps_scale": args.eps_scale, "min_pixels": args.min_pixels,
            "water_threshold": args.water_threshold,
            "sensor_window": args.sensor_window, "glt": bool(args.glt),
            "no_data": args.no_data, "seed": args.seed}


def _run_enhancement(args, cube):
    """Shared by enhance and detect: produce the enhancement map."""
    signature = _load_signature(args, cube.meta)
    artifacts = {}
    if args.filter == "traditional":
        emap = slf.matched_filter_traditional(cube, signature,
                                              column_window=args.column_window,
                                              eps_scale=args.eps_scale)
    else:
        nd = spectra.ndvi(cube)
        nw = spectra.ndwi(cube)
        cm = landcover.classify(nd, nw, water_threshold=args.water_threshold)
        cm = landcover.merge_small_classes(cm, min_pixels=args.min_pixels)
        stats = landcover.class_stats(cube, cm, eps_scale=args.eps_scale)
        grouping = None
        if args.glt:
            glt = hsi_io.read_glt(Path(args.glt))
            grouping = slf.sensor_groups(glt, window=args.sensor_window)
        emap = slf.slf_enhance(cube, cm, stats, signature, grouping=grouping,
                               eps_scale=args.eps_scale)
        artifacts["classmap"] = cm
        artifacts["stats"] = stats
    return emap, artifacts


def cmd_enhance(args) -> int:
    cube = hsi_io.open_cube(Path(args.cube), no_data=args.no_data)
    params = _enhance_params(args)
    cfg_hash = _config_hash(params)
    emap, artifacts = _run_enhancement(args, cube)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    stored = np.where(emap.valid, emap.values, hsi_io.DEFAULT_NO_DATA)
    hsi_io.write_scalar_map(outdir / "enhancement", stored)
    rgb, scale = render_scalar_png(emap.values, emap.valid)
    _save_png(outdir / "enhancement.png", rgb, "RGB")
    if "classmap" in artifacts:
        landcover.export_classmap_png(outdir / "classmap.png", artifacts["classmap"])
        landcover.save_class_stats(outdir / "class_stats", artifacts["stats"])
    _write_json(outdir / "enhancement.json",
                {"schema": "plumekit.enhancement/1", "config_hash": cfg_hash,
                 "seed": args.seed, "params": params, "png_scaling": scale,
                 "valid_pixels": int(emap.valid.sum())})
    _write_sidecar(outdir, "enhancement")
    print(f"wrote enhancement map to {outdir} "
          f"({int(emap.valid.sum())} valid pixels)")
    return 0


def cmd_tile(args) -> int:
    tiles = hsi_io.plan_tiles(args.height, args.width, args.size, args.overlap)
    payload = {"schema": "plumekit.tiles/1", "height": args.height,
               "width": args.width, "size": args.size, "overlap": args.overlap,
               "tiles": [{"row0": t.row0, "col0": t.col0, "size": t.size}
                         for t in tiles]}
    if args.out:
        _write_json(Path(args.out), payload)
    else:
        print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def _detector_params(args, n_swir: int) -> dict:
    return {"tile_size": args.tile_size, "overlap": args.overlap,
            "seed": args.seed, "d_model": args.d_model,
            "n_layers": args.n_layers, "n_heads": args.n_heads,
            "backbone_channels": args.backbone_channels,
            "swir_channels": n_swir,
            "confidence_threshold": args.confidence,
            "mask_threshold": args.mask_threshold,
            "workers": args.workers}


def cmd_detect(args) -> int:
    cube = hsi_io.open_cube(Path(args.cube), no_data=args.no_data)
    height, width = cube.meta.height, cube.meta.width
    if args.tile_size % 32:
        raise BadGeometry(f"tile size {args.tile_size} not divisible by 32")
    tiles = hsi_io.plan_tiles(height, width, args.tile_size, args.overlap)

    if args.enhancement:
        values, nd_sentinel = hsi_io.read_scalar_map(Path(args.enhancement))
        emap = slf.EnhancementMap(values=values,
                                  valid=(values != nd_sentinel) & np.isfinite(values))
    else:
        emap, _ = _run_enhancement(args, cube)
    if emap.values.shape != (height, width):
        raise BadGeometry(f"enhancement {emap.values.shape} vs cube "
                          f"{(height, width)}")
    enh_values = np.where(emap.valid, emap.values, 0.0)

    swir_range = spectra.select_bands(cube.meta, 2000.0, 2500.0)
    cfg = DetectorConfig(seed=args.seed, d_model=args.d_model,
                         n_layers=args.n_layers, n_heads=args.n_heads,
                         backbone_channels=args.backbone_channels,
                         swir_channels=swir_range.count,
                         confidence_threshold=args.confidence,
                         mask_threshold=args.mask_threshold)
    params = _detector_params(args, swir_range.count)
    cfg_hash = _config_hash(params)
    model = Detector(cfg)

    def run_tile(tile):
        rgb, rgb_valid = spectra.compose_rgb(cube, rows=tile.rows, cols=tile.cols)
        rgb = np.where(rgb_valid[:, :, None], rgb, 0.0)
        swir, swir_valid = cube.read_block(tile.rows, tile.cols, swir_range.slice)
        swir = np.where(swir_valid, swir, 0.0)
        enh = enh_values[tile.row0:tile.row0 + tile.size,
                         tile.col0:tile.col0 + tile.size]
        return model.forward(rgb, swir, enh)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(t) for t in tiles]

    # deterministic fusion in tile order: per-pixel max of fused query scores
    score_full = np.zeros((height, width))
    tile_records = []
    merged = []
    for tile, res in zip(tiles, results):
        up = np.repeat(np.repeat(res.score_map, 4, axis=0), 4, axis=1)
        window = score_full[tile.row0:tile.row0 + tile.size,
                            tile.col0:tile.col0 + tile.size]
        np.maximum(window, up, out=window)
        queries = []
        for q in range(cfg.n_queries):
            kept = bool(res.plume_probs[q] >= cfg.confidence_threshold)
            queries.append({"box": [float(v) for v in res.boxes[q]],
                            "score": float(res.plume_probs[q]), "kept": kept})
            if kept:
                cx, cy, w, h = res.boxes[q]
                merged.append({
                    "box": [float((tile.col0 + cx * tile.size) / width),
                            float((tile.row0 + cy * tile.size) / height),
                            float(w * tile.size / width),
                            float(h * tile.size / height)],
                    "score": float(res.plume_probs[q]),
                    "class": "plume",
                    "tile": [tile.row0, tile.col0]})
        tile_records.append({"tile": [tile.row0, tile.col0, tile.size],
                             "queries": queries})
    mask = score_full >= cfg.mask_threshold

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _save_png(outdir / "mask.png", (mask * np.uint8(255)), "L")
    hsi_io.write_scalar_map(outdir / "score_map", score_full)
    _write_json(outdir / "detections.json",
                {"schema": "plumekit.detections/1", "config_hash": cfg_hash,
                 "seed": args.seed, "params": params,
                 "image": {"height": height, "width": width},
                 "tiles": tile_records, "detections": merged})
    _write_sidecar(outdir, "detections")
    print(f"wrote detections for {len(tiles)} tiles to {outdir} "
          f"({len(merged)} above confidence)")
    return 0


def cmd_annotate_map(args) -> int:
    glt = hsi_io.read_glt(Path(args.glt))
    height, width = glt.shape
    try:
        x0, y0, dx, dy = (float(v) for v in args.geo.split(","))
    except ValueError as exc:
        raise MissingField(f"--geo expects x0,y0,dx,dy: {exc}") from exc
    grid = annotate.GeoGrid(x0=x0, y0=y0, dx=dx, dy=dy)

    patch_dir = Path(args.patches)
    stems = sorted(p.with_suffix("").with_suffix("")
                   for p in patch_dir.glob("*.manifest.json"))
    if not stems:
        raise MissingField(f"no patches (*.manifest.json) found in {patch_dir}")
    layers = []
    reports = []
    for stem in stems:
        patch = annotate.load_patch(stem)
        flight_px = grid.snap(patch.corners_geo)
        h, rms = annotate.homography_for_patch(patch, flight_px)
        layer = annotate.warp_mask(patch.values, h, (height, width))
        layers.append((layer, patch.source_type))
        reports.append({"patch": stem.name, "source_type": patch.source_type,
                        "reprojection_rms": rms,
                        "warped_pixels": int(np.count_nonzero(layer))})

    mask = annotate.composite_masks(layers)
    concentration = annotate.composite_concentrations(layers)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _save_png(outdir / "annotation_mask.png", mask, "RGB")
    hsi_io.write_scalar_map(outdir / "concentration", concentration)
    params = {"geo": [x0, y0, dx, dy], "n_patches": len(stems), "seed": args.seed}
    _write_json(outdir / "annotation.json",
                {"schema": "plumekit.annotation/1",
                 "config_hash": _config_hash(params), "seed": args.seed,
                 "params": params, "patches": reports})
    _write_sidecar(outdir, "annotation")
    print(f"mapped {len(stems)} patches onto {height}x{width} flightline")
    return 0


def _gt_instances_from_png(path: Path):
    """Split a color-coded mask into per-instance binary masks with classes."""
    from PIL import Image
    from scipy.ndimage import label as label_components

    img = np.asarray(Image.open(path).convert("RGB"))
    layers = {"point_source": (img[..., 0] > 127) & (img[..., 2] <= 127),
              "diffused_source": (img[..., 2] > 127) & (img[..., 0] <= 127)}
    instances = []
    for cls, layer in layers.items():
        labels, n = label_components(layer, structure=np.ones((3, 3), int))
        for comp in range(1, n + 1):
            instances.append((labels == comp, cls))
    return instances


def _binary_mask_from_png(path: Path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("L")) > 0


def _find_mask(json_path: Path) -> Path | None:
    stem = json_path.stem.replace(".detections", "")
    for candidate in (json_path.with_name(f"{stem}_mask.png"),
                      json_path.with_name("mask.png"),
                      json_path.with_name(f"{stem}.mask.png")):
        if candidate.exists():
            return candidate
    return None


def _eval_jsons(directory: Path) -> list[Path]:
    return sorted(p for p in directory.glob("*.json")
                  if "sidecar" not in p.name and "scale" not in p.name
                  and p.name not in ("synth.json", "enhancement.json",
                                     "annotation.json"))


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = _eval_jsons(pred_dir)
    gt_files = _eval_jsons(gt_dir)
    if not gt_files:
        raise EmptyGroundTruth(f"no ground-truth JSON files in {gt_dir}")
    if len(pred_files) != len(gt_files):
        raise MissingField(f"{len(pred_files)} prediction files vs "
                           f"{len(gt_files)} ground-truth files")

    all_preds, all_gts, iou_scores = [], [], []
    any_gt_box = False
    for idx, (pf, gf) in enumerate(zip(pred_files, gt_files)):
        pred = json.loads(pf.read_text())
        gt = json.loads(gf.read_text())
        # offsetting cx by 2*idx keeps boxes from different images disjoint
        # while preserving within-image overlaps, so one flat AP pass works
        for d in pred.get("detections", []):
            box = np.asarray(d["box"], float) + np.array([2.0 * idx, 0, 0, 0])
            all_preds.append((box, float(d["score"]), d.get("class", "plume")))
        for b in gt.get("boxes", []):
            box = np.asarray(b["box"], float) + np.array([2.0 * idx, 0, 0, 0])
            all_gts.append((box, b.get("class", "plume")))
            any_gt_box = True
        pred_mask_path = _find_mask(pf)
        gt_mask_path = _find_mask(gf)
        if pred_mask_path and gt_mask_path:
            instances = _gt_instances_from_png(gt_mask_path)
            if instances:
                pred_mask = _binary_mask_from_png(pred_mask_path)
                iou_scores.extend(
                    matchloss.instance_ious(pred_mask, [m for m, _ in instances]))

    if not any_gt_box:
        raise EmptyGroundTruth("ground truth contains no boxes")
    report = matchloss.evaluate_detections(all_preds, all_gts,
                                           iou_threshold=args.iou)
    params = {"iou": args.iou, "n_images": len(gt_files)}
    payload = {"schema": "plumekit.metrics/1",
               "config_hash": _config_hash(params),
               "map_50": report["map"] if args.iou == 0.5 else None,
               f"map_{int(round(args.iou * 100))}": report["map"],
               "per_class_ap": report["per_class_ap"],
               "miou": float(np.mean(iou_scores)) if iou_scores else None,
               "n_images": len(gt_files)}
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps(payload, indent=1, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    values, no_data = hsi_io.read_scalar_map(Path(args.map))
    valid = (values != no_data) & np.isfinite(values)
    rgb, scale = render_scalar_png(values, valid)
    out = Path(args.out)
    _save_png(out, rgb, "RGB")
    _write_json(out.with_suffix(".scale.json"),
                {"schema": "plumekit.plot/1", "scaling": scale,
                 "source": Path(args.map).name})
    print(f"wrote {out} (vmin={scale['vmin']:.4g}, vmax={scale['vmax']:.4g})")
    return 0


# --- argument plumbing ---

def _add_common(sub):
    sub.add_argument("--config", help="key = value config file; flags override")
    sub.add_argument("--seed", type=int, default=0, help="recorded in outputs")


def _add_enhance_options(sub):
    sub.add_argument("--signature", help="two-column CH4 signature table "
                                         "(default: packaged reference)")
    sub.add_argument("--filter", choices=("slf", "traditional"), default="slf")
    sub.add_argument("--column-window", type=int, default=slf.DEFAULT_SENSOR_WINDOW,
                     help="adjacent columns per window for the traditional filter")
    sub.add_argument("--eps-scale", type=float, default=landcover.DEFAULT_EPS_SCALE)
    sub.add_argument("--min-pixels", type=int, default=landcover.DEFAULT_MIN_PIXELS,
                     help="merge land-cover classes below this pixel count")
    sub.add_argument("--water-threshold", type=float,
                     default=landcover.WATER_NDWI_THRESHOLD)
    sub.add_argument("--glt", help="GLT header for sensor-window grouping")
    sub.add_argument("--sensor-window", type=int, default=slf.DEFAULT_SENSOR_WINDOW)
    sub.add_argument("--no-data", type=float, default=None,
                     help="override the cube's no-data sentinel")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="plumekit",
        description="Hyperspectral methane plume enhancement and detection")
    subs = parser.add_subparsers(dest="command", required=True)
    by_name = {}

    sp = subs.add_parser("synth", help="generate a seeded synthetic flightline")
    sp.add_argument("--out", required=True)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--bands", type=int, default=48)
    sp.add_argument("--plume-amplitude", type=float, default=1.5)
    sp.add_argument("--no-plume", action="store_true")
    _add_common(sp)
    sp.set_defaults(func=cmd_synth)
    by_name["synth"] = sp

    sp = subs.add_parser("enhance", help="compute the CH4 enhancement map")
    sp.add_argument("--cube", required=True, help="ENVI header of the radiance cube")
    sp.add_argument("--out", required=True)
    _add_enhance_options(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_enhance)
    by_name["enhance"] = sp

    sp = subs.add_parser("tile", help="plan overlapping tiles")
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--overlap", type=int, default=128)
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(func=cmd_tile)
    by_name["tile"] = sp

    sp = subs.add_parser("detect", help="tile the scene and run the forward pass")
    sp.add_argument("--cube", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--enhancement", help="precomputed enhancement map header; "
                                          "computed from the cube when omitted")
    sp.add_argument("--tile-size", type=int, default=256)
    sp.add_argument("--overlap", type=int, default=128)
    sp.add_argument("--d-model", type=int, default=256)
    sp.add_argument("--n-layers", type=int, default=6)
    sp.add_argument("--n-heads", type=int, default=8)
    sp.add_argument("--backbone-channels", type=int, default=64)
    sp.add_argument("--confidence", type=float, default=0.5)
    sp.add_argument("--mask-threshold", type=float, default=0.5)
    sp.add_argument("--workers", type=int, default=1)
    _add_enhance_options(sp)
    _add_common(sp)
    sp.set_defaults(func=cmd_detect)
    by_name["detect"] = sp

    sp = subs.add_parser("annotate-map",
                         help="warp annotation patches onto the flightline")
    sp.add_argument("--glt", required=True, help="GLT header of the flightline")
    sp.add_argument("--patches", required=True,
                    help="directory of patch containers (*.manifest.json + .bin)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--geo", default="0,0,1,1",
                    help="flightline georeference x0,y0,dx,dy")
    _add_common(sp)
    sp.set_defaults(func=cmd_annotate_map)
    by_name["annotate-map"] = sp

    sp = subs.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--iou", type=float, default=0.5)
    sp.add_argument("--out")
    _add_common(sp)
    sp.set_defaults(func=cmd_eval)
    by_name["eval"] = sp

    sp = subs.add_parser("plot", help="render a float map as a PNG")
    sp.add_argument("--map", required=True, help="single-band map header")
    sp.add_argument("--out", required=True)
    _add_common(sp)
    sp.set_defaults(func=cmd_plot)
    by_name["plot"] = sp

    return parser, by_name


def _load_config_file(path: Path) -> dict:
    out = {}
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or "=" not in line:
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(sub: argparse.ArgumentParser, cfg: dict) -> None:
    for action in sub._actions:
        if action.dest in cfg:
            raw = cfg[action.dest]
            if isinstance(action, (argparse._StoreTrueAction,
                                   argparse._StoreFalseAction)):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
            sub.set_defaults(**{action.dest: value})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, by_name = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            _apply_config(by_name[args.command], _load_config_file(Path(args.config)))
            args = parser.parse_args(argv)  # flags still override the file
        return args.func(args)
    except PlumekitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return 2 if code else 0
    except Exception as exc:  # internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
