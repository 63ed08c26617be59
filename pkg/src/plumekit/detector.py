"""Forward-only set-prediction detector over hyperspectral tile features.

Geometry mirrors the reference design: two strided-convolution backbones for
the visible and short-wave-infrared band stacks, feature concatenation and a
transformer encoder; a third backbone turns the CH4 enhancement map into
candidate features that refine a set of learnable queries before a
cross-attention-only decoder; feed-forward heads emit boxes and class scores
and an attention-based head emits per-query mask heatmaps.

Everything runs in float64 with seeded random weights, so a given (seed,
input) pair reproduces bit for bit. There is no training path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit as sigmoid

from .errors import BadGeometry, DimensionMismatch, OddDimension

DOWNSAMPLE = 32
LN_EPS = 1e-5


@dataclass
class DetectorConfig:
    d_model: int = 256
    n_queries: int = 100
    n_layers: int = 6
    n_heads: int = 8
    backbone_channels: int = 64   # paper-scale 2048; desk default keeps CPU runs fast
    embed_out: int = 512
    ffn_dim: int = 1024
    swir_channels: int = 100
    downsample_factor: int = 32
    mask_threshold: float = 0.5
    confidence_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise DimensionMismatch(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        if self.downsample_factor != DOWNSAMPLE:
            raise BadGeometry("downsample factor is fixed at 32")

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DetectorConfig":
        kwargs = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line or "=" not in line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key in ("mask_threshold", "confidence_threshold"):
                kwargs[key] = float(value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def stage_channels(n_out: int) -> list[int]:
    return [max(n_out // 8, 4), max(n_out // 8, 4), max(n_out // 4, 4),
            max(n_out // 2, 4), n_out]


# --- primitive ops ---

def relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, w):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + LN_EPS) * w["g"] + w["b"]


def conv2d(x, w, b, stride=1, pad=1):
    """3x3/1x1 convolution, channels-last; x is (H, W, C) or (B, H, W, C)."""
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise DimensionMismatch(f"conv expects {cin} channels, got {x.shape[-1]}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    out = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1])) + b
    return out[0] if squeeze else out


def upsample2(x):
    """Nearest-neighbor x2 on the two spatial axes before the channel axis."""
    return np.repeat(np.repeat(x, 2, axis=-3), 2, axis=-2)


def ffn_block(x, w):
    return relu(x @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]


def multi_head_attention(queries, keys, values, w, n_heads, trace=None):
    """Scaled dot-product attention; softmax rows sum to one over the keys."""
    nq, d = queries.shape
    nk = keys.shape[0]
    if d % n_heads:
        raise DimensionMismatch(f"width {d} not divisible by {n_heads} heads")
    if keys.shape != values.shape or keys.shape[1] != d:
        raise DimensionMismatch(
            f"keys {keys.shape} / values {values.shape} incompatible with width {d}"
        )
    dh = d // n_heads
    q = (queries @ w["wq"] + w["bq"]).reshape(nq, n_heads, dh)
    k = (keys @ w["wk"] + w["bk"]).reshape(nk, n_heads, dh)
    v = (values @ w["wv"] + w["bv"]).reshape(nk, n_heads, dh)
    scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(dh)
    attn = softmax(scores, axis=-1)
    if trace is not None:
        trace.append(attn)
    out = np.einsum("hqk,khd->qhd", attn, v).reshape(nq, d)
    return out @ w["wo"] + w["bo"]


def positional_embedding(height: int, width: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal embedding, d/2 channels per axis, rows then cols."""
    if d % 2:
        raise OddDimension(f"embedding width must be even, got {d}")
    f = d // 2
    idx = np.arange(f)
    omega = 1.0 / (10000.0 ** (2.0 * (idx // 2) / f))

    def axis_embed(n):
        angle = np.arange(n)[:, None] * omega[None, :]
        return np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))

    ye = axis_embed(height)
    xe = axis_embed(width)
    return np.concatenate([
        np.broadcast_to(ye[:, None, :], (height, width, f)),
        np.broadcast_to(xe[None, :, :], (height, width, f)),
    ], axis=-1)


# --- weight construction ---

class _Init:
    """Seeded uniform(+-1/sqrt(fan_in)) initializer; biases start at zero."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def dense(self, n_in, n_out):
        limit = 1.0 / np.sqrt(n_in)
        return {"w": self.rng.uniform(-limit, limit, size=(n_in, n_out)),
                "b": np.zeros(n_out)}

    def conv(self, kh, kw, cin, cout):
        limit = 1.0 / np.sqrt(kh * kw * cin)
        return {"w": self.rng.uniform(-limit, limit, size=(kh, kw, cin, cout)),
                "b": np.zeros(cout)}

    def norm(self, d):
        return {"g": np.ones(d), "b": np.zeros(d)}

    def attention(self, d):
        out = {}
        for name in ("q", "k", "v", "o"):
            lin = self.dense(d, d)
            out[f"w{name}"], out[f"b{name}"] = lin["w"], lin["b"]
        return out

    def backbone(self, cin, n_out):
        stages = []
        for cout in stage_channels(n_out):
            stages.append(self.conv(3, 3, cin, cout))
            cin = cout
        return stages


def build_weights(cfg: DetectorConfig) -> dict:
    """All parameters, drawn in a fixed order from the config seed."""
    init = _Init(cfg.seed)
    d, n = cfg.d_model, cfg.backbone_channels
    weights = {
        "backbone_rgb": init.backbone(3, n),
        "backbone_swir": init.backbone(cfg.swir_channels, n),
        "backbone_sfg": init.backbone(1, n),
        "proj_comb": init.dense(2 * n, n),
        "proj_reduce": init.dense(n, d),
        "sfg_proj": init.dense(n, d),
        "queries": init.rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d),
                                    size=(cfg.n_queries, d)),
        "encoder": [
            {"ln1": init.norm(d), "attn": init.attention(d),
             "ln2": init.norm(d),
             "ffn": {"w1": init.dense(d, cfg.ffn_dim)["w"],
                     "b1": np.zeros(cfg.ffn_dim),
                     "w2": init.dense(cfg.ffn_dim, d)["w"],
                     "b2": np.zeros(d)}}
            for _ in range(cfg.n_layers)
        ],
        "qr": [
            {"ln1": init.norm(d), "self_attn": init.attention(d),
             "ln2": init.norm(d), "cross_attn": init.attention(d),
             "ln3": init.norm(d),
             "ffn": {"w1": init.dense(d, cfg.ffn_dim)["w"],
                     "b1": np.zeros(cfg.ffn_dim),
                     "w2": init.dense(cfg.ffn_dim, d)["w"],
                     "b2": np.zeros(d)}}
            for _ in range(cfg.n_layers)
        ],
        "decoder": [
            {"ln1": init.norm(d), "cross_attn": init.attention(d),
             "ln2": init.norm(d),
             "ffn": {"w1": init.dense(d, cfg.ffn_dim)["w"],
                     "b1": np.zeros(cfg.ffn_dim),
                     "w2": init.dense(cfg.ffn_dim, d)["w"],
                     "b2": np.zeros(d)}}
            for _ in range(cfg.n_layers)
        ],
        "out_proj": init.dense(d, cfg.embed_out),
        "box_head": {"l1": init.dense(cfg.embed_out, d),
                     "l2": init.dense(d, d),
                     "l3": init.dense(d, 4)},
        "class_head": init.dense(cfg.embed_out, 2),
    }
    mask_ch = cfg.n_heads
    chans = stage_channels(n)
    weights["mask_head"] = {
        "qproj": init.dense(cfg.embed_out, d),
        "kproj": init.dense(d, d),
        "conv_in": init.conv(3, 3, cfg.n_heads, mask_ch),
        # fuse the /16, /8, /4 backbone stages while upsampling x2 each step
        "stages": [
            {"lat": init.dense(chans[3], mask_ch), "conv": init.conv(3, 3, mask_ch, mask_ch)},
            {"lat": init.dense(chans[2], mask_ch), "conv": init.conv(3, 3, mask_ch, mask_ch)},
            {"lat": init.dense(chans[1], mask_ch), "conv": init.conv(3, 3, mask_ch, mask_ch)},
        ],
        "out": init.dense(mask_ch, 1),
    }
    return weights


# --- network stages ---

def backbone_forward(img: np.ndarray, stages, return_stages: bool = False):
    """Five stride-2 stages: (H, W, Cin) -> (H/32, W/32, N)."""
    if img.ndim != 3:
        raise BadGeometry(f"expected (H, W, C) input, got {img.shape}")
    height, width = img.shape[:2]
    if height % DOWNSAMPLE or width % DOWNSAMPLE:
        raise BadGeometry(f"spatial dims {height}x{width} not divisible by {DOWNSAMPLE}")
    x = img
    outs = []
    for stage in stages:
        x = relu(conv2d(x, stage["w"], stage["b"], stride=2, pad=1))
        outs.append(x)
    return (x, outs) if return_stages else x


def concat_project(f_rgb: np.ndarray, f_swir: np.ndarray, w: dict) -> np.ndarray:
    """Channel concat of the two branches followed by a pointwise projection."""
    if f_rgb.shape[:2] != f_swir.shape[:2]:
        raise DimensionMismatch(f"{f_rgb.shape} vs {f_swir.shape}")
    return np.concatenate([f_rgb, f_swir], axis=-1) @ w["w"] + w["b"]


def encoder_forward(f_z: np.ndarray, p: np.ndarray, layers, cfg: DetectorConfig,
                    trace=None) -> np.ndarray:
    """Self-attention stack over the HW tokens, positions added to q and k."""
    if f_z.shape != p.shape:
        raise BadGeometry(f"features {f_z.shape} vs positions {p.shape}")
    height, width, d = f_z.shape
    x = f_z.reshape(-1, d)
    pos = p.reshape(-1, d)
    for lw in layers:
        h = layer_norm(x, lw["ln1"])
        x = x + multi_head_attention(h + pos, h + pos, h, lw["attn"],
                                     cfg.n_heads, trace)
        h = layer_norm(x, lw["ln2"])
        x = x + ffn_block(h, lw["ffn"])
    return x.reshape(height, width, d)


def sfg_forward(enh: np.ndarray, weights: dict, cfg: DetectorConfig) -> np.ndarray:
    """Enhancement map -> candidate features (H, W, d)."""
    if enh.ndim != 2:
        raise BadGeometry(f"expected a 2-D enhancement map, got {enh.shape}")
    feats = backbone_forward(enh[:, :, None], weights["backbone_sfg"])
    return feats @ weights["sfg_proj"]["w"] + weights["sfg_proj"]["b"]


def query_refiner(f_mc: np.ndarray, queries: np.ndarray, layers,
                  cfg: DetectorConfig, trace=None) -> np.ndarray:
    """Queries self-attend, then cross-attend into the candidate tokens."""
    d = queries.shape[1]
    if f_mc.shape[-1] != d:
        raise DimensionMismatch(f"candidate width {f_mc.shape[-1]} != query width {d}")
    m = f_mc.reshape(-1, d)
    q = queries
    for lw in layers:
        h = layer_norm(q, lw["ln1"])
        q = q + multi_head_attention(h, h, h, lw["self_attn"], cfg.n_heads, trace)
        h = layer_norm(q, lw["ln2"])
        q = q + multi_head_attention(h, m, m, lw["cross_attn"], cfg.n_heads, trace)
        h = layer_norm(q, lw["ln3"])
        q = q + ffn_block(h, lw["ffn"])
    return q


def decoder_forward(f_e: np.ndarray, p: np.ndarray, q_ref: np.ndarray,
                    weights: dict, cfg: DetectorConfig, trace=None) -> np.ndarray:
    """Cross-attention-only stack; no query-query interaction anywhere."""
    d = q_ref.shape[1]
    if f_e.shape != p.shape or f_e.shape[-1] != d:
        raise DimensionMismatch(f"f_e {f_e.shape} / p {p.shape} / queries width {d}")
    mem = f_e.reshape(-1, d)
    keys = mem + p.reshape(-1, d)  # positions on keys only
    x = q_ref
    for lw in weights["layers"]:
        h = layer_norm(x, lw["ln1"])
        x = x + multi_head_attention(h, keys, mem, lw["cross_attn"],
                                     cfg.n_heads, trace)
        h = layer_norm(x, lw["ln2"])
        x = x + ffn_block(h, lw["ffn"])
    return x @ weights["out"]["w"] + weights["out"]["b"]


def ffn_heads(e_out: np.ndarray, weights: dict):
    """Boxes via a 3-layer perceptron + sigmoid, class logits via a linear map."""
    bh = weights["box_head"]
    h = relu(e_out @ bh["l1"]["w"] + bh["l1"]["b"])
    h = relu(h @ bh["l2"]["w"] + bh["l2"]["b"])
    boxes = sigmoid(h @ bh["l3"]["w"] + bh["l3"]["b"])
    ch = weights["class_head"]
    logits = e_out @ ch["w"] + ch["b"]
    return boxes, logits


def mask_head(e_out: np.ndarray, f_e: np.ndarray, pyramid, weights: dict,
              cfg: DetectorConfig, trace=None, query_chunk: int = 16) -> np.ndarray:
    """Per-query attention maps over f_e upsampled through the feature pyramid.

    ``pyramid`` holds the /16, /8 and /4 RGB backbone stages (coarse to fine).
    Returns per-query heatmaps at H0/4 resolution, sigmoid-activated.
    """
    height, width, d = f_e.shape
    if len(pyramid) != 3:
        raise BadGeometry(f"expected 3 pyramid levels, got {len(pyramid)}")
    for i, feat in enumerate(pyramid):
        expect = (height * 2 ** (i + 1), width * 2 ** (i + 1))
        if feat.shape[:2] != expect:
            raise BadGeometry(f"pyramid level {i} is {feat.shape[:2]}, expected {expect}")
    mw = weights
    q = e_out @ mw["qproj"]["w"] + mw["qproj"]["b"]
    k = f_e.reshape(-1, d) @ mw["kproj"]["w"] + mw["kproj"]["b"]
    dh = d // cfg.n_heads
    qh = q.reshape(-1, cfg.n_heads, dh)
    kh = k.reshape(-1, cfg.n_heads, dh)
    attn = softmax(np.einsum("qhd,khd->qhk", qh, kh) / np.sqrt(dh), axis=-1)
    if trace is not None:
        trace.append(attn)
    maps = attn.reshape(-1, cfg.n_heads, height, width).transpose(0, 2, 3, 1)

    laterals = [feat @ st["lat"]["w"] + st["lat"]["b"]
                for st, feat in zip(mw["stages"], pyramid)]
    heats = []
    for q0 in range(0, maps.shape[0], query_chunk):
        x = relu(conv2d(maps[q0:q0 + query_chunk], mw["conv_in"]["w"],
                        mw["conv_in"]["b"]))
        for st, lat in zip(mw["stages"], laterals):
            x = upsample2(x)
            x = relu(conv2d(x, st["conv"]["w"], st["conv"]["b"]) + lat[None])
        heats.append(sigmoid(x @ mw["out"]["w"] + mw["out"]["b"])[..., 0])
    return np.concatenate(heats, axis=0)


def merge_heatmaps(heatmaps: np.ndarray, plume_probs: np.ndarray,
                   cfg: DetectorConfig):
    """Fuse per-query heatmaps into one mask at full tile resolution.

    Queries below the confidence threshold are dropped; surviving heatmaps
    combine by per-pixel max, threshold, then x4 nearest-neighbor upsampling.
    """
    kept = plume_probs >= cfg.confidence_threshold
    if kept.any():
        score_map = heatmaps[kept].max(axis=0)
    else:
        score_map = np.zeros(heatmaps.shape[1:])
    binary = score_map >= cfg.mask_threshold
    full = np.repeat(np.repeat(binary, 4, axis=0), 4, axis=1)
    return full, score_map


@dataclass
class DetectionResult:
    f_comb: np.ndarray
    f_e: np.ndarray
    f_mc: np.ndarray
    q_ref: np.ndarray
    e_out: np.ndarray
    boxes: np.ndarray          # (n_queries, 4) cx, cy, w, h in [0, 1]
    logits: np.ndarray         # (n_queries, 2) {plume, no-object}
    plume_probs: np.ndarray    # (n_queries,)
    heatmaps: np.ndarray       # (n_queries, H0/4, W0/4)
    mask: np.ndarray           # (H0, W0) bool
    score_map: np.ndarray      # (H0/4, W0/4) fused pre-threshold scores


class Detector:
    """Bundles the seeded weights with the full forward pass."""

    def __init__(self, cfg: DetectorConfig, weights: dict | None = None):
        self.cfg = cfg
        self.weights = weights if weights is not None else build_weights(cfg)

    def forward(self, rgb: np.ndarray, swir: np.ndarray, enh: np.ndarray,
                trace=None) -> DetectionResult:
        cfg, w = self.cfg, self.weights
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionMismatch(f"rgb must be (H, W, 3), got {rgb.shape}")
        if swir.shape[:2] != rgb.shape[:2] or enh.shape != rgb.shape[:2]:
            raise DimensionMismatch("rgb/swir/enhancement spatial dims disagree")
        if swir.shape[2] != cfg.swir_channels:
            raise DimensionMismatch(
                f"swir has {swir.shape[2]} channels, config expects {cfg.swir_channels}"
            )
        f_rgb, stages = backbone_forward(rgb, w["backbone_rgb"], return_stages=True)
        f_swir = backbone_forward(swir, w["backbone_swir"])
        f_comb = concat_project(f_rgb, f_swir, w["proj_comb"])
        f_z = f_comb @ w["proj_reduce"]["w"] + w["proj_reduce"]["b"]
        p = positional_embedding(*f_z.shape[:2], cfg.d_model)
        f_e = encoder_forward(f_z, p, w["encoder"], cfg, trace)
        f_mc = sfg_forward(enh, w, cfg)
        q_ref = query_refiner(f_mc, w["queries"], w["qr"], cfg, trace)
        e_out = decoder_forward(f_e, p, q_ref,
                                {"layers": w["decoder"], "out": w["out_proj"]},
                                cfg, trace)
        boxes, logits = ffn_heads(e_out, w)
        plume_probs = softmax(logits, axis=-1)[:, 0]
        pyramid = [stages[3], stages[2], stages[1]]
        heatmaps = mask_head(e_out, f_e, pyramid, w["mask_head"], cfg, trace)
        mask, score_map = merge_heatmaps(heatmaps, plume_probs, cfg)
        return DetectionResult(f_comb=f_comb, f_e=f_e, f_mc=f_mc, q_ref=q_ref,
                               e_out=e_out, boxes=boxes, logits=logits,
                               plume_probs=plume_probs, heatmaps=heatmaps,
                               mask=mask, score_map=score_map)


# --- weight serialization: flat binary blob + shape manifest ---

def _flatten(prefix, node, out):
    if isinstance(node, dict):
        for key, val in node.items():
            _flatten(f"{prefix}.{key}" if prefix else key, val, out)
    elif isinstance(node, list):
        for i, val in enumerate(node):
            _flatten(f"{prefix}.{i}", val, out)
    else:
        out[prefix] = np.asarray(node, dtype=np.float64)


def save_weights(path_stem, weights: dict):
    flat: dict[str, np.ndarray] = {}
    _flatten("", weights, flat)
    stem = Path(path_stem)
    manifest = {}
    offset = 0
    blob = bytearray()
    for name, arr in flat.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest[name] = {"shape": list(arr.shape), "offset": offset}
        blob.extend(raw)
        offset += len(raw)
    stem.with_suffix(".bin").write_bytes(bytes(blob))
    stem.with_suffix(".manifest.json").write_text(
        json.dumps({"dtype": "<f8", "entries": manifest}, indent=1, sort_keys=True)
    )
    return stem.with_suffix(".manifest.json"), stem.with_suffix(".bin")


def load_weights(path_stem) -> dict:
    stem = Path(path_stem)
    meta = json.loads(stem.with_suffix(".manifest.json").read_text())
    raw = stem.with_suffix(".bin").read_bytes()
    root: dict = {}
    for name, entry in meta["entries"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=meta["dtype"], count=count,
                            offset=entry["offset"]).reshape(shape).copy()
        parts = name.split(".")
        node = root
        for part, nxt in zip(parts[:-1], parts[1:]):
            key = int(part) if part.isdigit() else part
            default: dict | list = [] if nxt.isdigit() else {}
            if isinstance(node, list):
                while len(node) <= key:
                    node.append(None)
                if node[key] is None:
                    node[key] = default
                node = node[key]
            else:
                node = node.setdefault(key, default)
        last = parts[-1]
        if isinstance(node, list):
            idx = int(last)
            while len(node) <= idx:
                node.append(None)
            node[idx] = arr
        else:
            node[last] = arr
    return root
