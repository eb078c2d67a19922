"""Persistence: splat PLY files, feature sidecars, images, configs, checkpoints.

Splat files use the de-facto binary PLY layout (x,y,z, zeroed normals,
f_dc_0..2, f_rest_0..44 channel-major, opacity, scale_0..2, rot_0..3) with
little-endian float32 records.  Opacity and scale are stored
pre-activation through the exact inverse transforms (clamped 1e-6 inside
the bounds), so reading applies the forward activations.  Semantic
features travel in a companion sidecar binary that can also carry a
28 x d_f classifier block.

Scene configs are strict JSON: any unknown key is rejected with its
location before any computation starts.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .attention import AttentionCache, BlockWeights, RelPosBias
from .camera import Camera
from .core import (
    MAX_FEATURE_DIM,
    NUM_CLASSES,
    ActivationConfig,
    ClassPalette,
    GaussianCloud,
    activate_scale,
    inverse_activate_scale,
    inverse_sigmoid,
    sigmoid,
)
from .losses import LossConfig
from .rasterizer import RenderSettings

SIDECAR_MAGIC = b"GSFC"
SIDECAR_VERSION = 1

_PLY_PROPS = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


class SplatFormatError(ValueError):
    """Malformed splat or sidecar file."""


def write_splat(path, cloud: GaussianCloud, cfg: ActivationConfig = ActivationConfig(),
                sidecar: Optional[object] = None,
                classifier: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> None:
    """Write an activated cloud as a binary splat PLY (plus feature sidecar).

    Opacity and scale are inverted to their pre-activation values so the
    records interoperate with standard splat tooling; features (when
    d_f > 0, or when a classifier is supplied) go to `sidecar`, defaulting
    to the same path with a .feat suffix.
    """
    path = Path(path)
    n = cloud.count
    rec = np.zeros((n, len(_PLY_PROPS)), dtype="<f4")
    rec[:, 0:3] = cloud.positions
    # normals stay zero for viewer compatibility
    rec[:, 6:9] = cloud.sh_coeffs[:, 0, :]
    # rest coefficients channel-major: 15 for R, then G, then B
    rec[:, 9:54] = cloud.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, 45)
    rec[:, 54] = inverse_sigmoid(np.clip(cloud.opacities, 1e-6, 1.0 - 1e-6))
    rec[:, 55:58] = inverse_activate_scale(cloud.scales, cfg)
    rec[:, 58:62] = cloud.rotations

    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n"
    header += "".join(f"property float {p}\n" for p in _PLY_PROPS)
    header += "end_header\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(rec).tobytes())

    write_feature_sidecar(_sidecar_path(path, sidecar), cloud.features, classifier)


def _sidecar_path(path: Path, sidecar) -> Path:
    return Path(sidecar) if sidecar is not None else path.with_suffix(".feat")


def write_feature_sidecar(path, features: np.ndarray,
                          classifier: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> None:
    """magic | version u32 | N u64 | d_f u32 | flags u32 | features | classifier block."""
    features = np.asarray(features).astype("<f4")
    if features.ndim != 2:
        raise ValueError("features must be (N, d_f)")
    if features.shape[1] > MAX_FEATURE_DIM:
        raise ValueError(f"feature dim exceeds {MAX_FEATURE_DIM}")
    flags = 1 if classifier is not None else 0
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<IQII", SIDECAR_VERSION, features.shape[0], features.shape[1], flags))
        fh.write(np.ascontiguousarray(features).tobytes())
        if classifier is not None:
            weight, bias = classifier
            weight = np.asarray(weight).astype("<f4")
            bias = np.asarray(bias).astype("<f4")
            if weight.shape != (NUM_CLASSES, features.shape[1]) or bias.shape != (NUM_CLASSES,):
                raise ValueError("classifier block must be (28, d_f) plus (28,) bias")
            fh.write(np.ascontiguousarray(weight).tobytes())
            fh.write(np.ascontiguousarray(bias).tobytes())


def read_feature_sidecar(path) -> Tuple[np.ndarray, Optional[Tuple[np.ndarray, np.ndarray]]]:
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != SIDECAR_MAGIC:
        raise SplatFormatError(f"{path}: not a feature sidecar")
    version, n, d_f, flags = struct.unpack("<IQII", raw[4:24])
    if version != SIDECAR_VERSION:
        raise SplatFormatError(f"{path}: unsupported sidecar version {version}")
    if d_f > MAX_FEATURE_DIM:
        raise SplatFormatError(f"{path}: feature dim {d_f} exceeds {MAX_FEATURE_DIM}")
    need = n * d_f * 4
    body = raw[24:]
    if len(body) < need:
        raise SplatFormatError(f"{path}: truncated feature payload")
    features = np.frombuffer(body[:need], dtype="<f4").reshape(n, d_f).astype(np.float64)
    classifier = None
    if flags & 1:
        cls_bytes = NUM_CLASSES * d_f * 4 + NUM_CLASSES * 4
        block = body[need:need + cls_bytes]
        if len(block) < cls_bytes:
            raise SplatFormatError(f"{path}: truncated classifier block")
        weight = np.frombuffer(block[:NUM_CLASSES * d_f * 4], dtype="<f4").reshape(NUM_CLASSES, d_f)
        bias = np.frombuffer(block[NUM_CLASSES * d_f * 4:], dtype="<f4")
        classifier = (weight.astype(np.float64), bias.astype(np.float64))
    return features, classifier


def read_splat(path, cfg: ActivationConfig = ActivationConfig(),
               sidecar: Optional[object] = None,
               ) -> Tuple[GaussianCloud, Optional[Tuple[np.ndarray, np.ndarray]]]:
    """Read a splat PLY (+ sidecar); returns (cloud, classifier-or-None).

    A missing sidecar yields zero-width features with a warning; a sidecar
    whose primitive count disagrees with the PLY is an error.
    """
    path = Path(path)
    raw = path.read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if not raw.startswith(b"ply\n") or pos < 0:
        raise SplatFormatError(f"{path}: malformed header")
    header_lines = raw[:pos].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header_lines:
        raise SplatFormatError(f"{path}: expected binary little-endian PLY")
    n = None
    props = []
    for line in header_lines:
        if line.startswith("element vertex "):
            n = int(line.split()[-1])
        elif line.startswith("element "):
            raise SplatFormatError(f"{path}: unexpected element {line!r}")
        elif line.startswith("property "):
            parts = line.split()
            if parts[1] != "float":
                raise SplatFormatError(f"{path}: non-float property {line!r}")
            props.append(parts[2])
    if n is None or props != _PLY_PROPS:
        raise SplatFormatError(f"{path}: malformed header (unexpected property layout)")
    body = raw[pos + len(marker):]
    need = n * len(_PLY_PROPS) * 4
    if len(body) < need:
        raise SplatFormatError(f"{path}: truncated payload ({len(body)} bytes, need {need})")
    rec = np.frombuffer(body[:need], dtype="<f4").reshape(n, len(_PLY_PROPS)).astype(np.float64)

    sh = np.empty((n, 16, 3), dtype=np.float64)
    sh[:, 0, :] = rec[:, 6:9]
    sh[:, 1:, :] = rec[:, 9:54].reshape(n, 3, 15).transpose(0, 2, 1)

    sidecar_path = _sidecar_path(path, sidecar)
    classifier = None
    if sidecar_path.exists():
        features, classifier = read_feature_sidecar(sidecar_path)
        if features.shape[0] != n:
            raise SplatFormatError(
                f"sidecar mismatch: {sidecar_path} holds {features.shape[0]} primitives, splat has {n}")
    else:
        warnings.warn(f"feature sidecar {sidecar_path} missing; features default to width 0")
        features = np.zeros((n, 0))

    cloud = GaussianCloud(
        positions=rec[:, 0:3],
        rotations=rec[:, 58:62],
        scales=activate_scale(rec[:, 55:58], cfg),
        opacities=sigmoid(rec[:, 54]),
        sh_coeffs=sh,
        features=features,
    )
    return cloud, classifier


def write_image(path, plane: np.ndarray) -> None:
    """8-bit PNG from a [0, 1] float plane, (H, W) grayscale or (H, W, 3)."""
    arr = np.asarray(plane, dtype=np.float64)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError("plane must be (H, W) or (H, W, 3)")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L" if arr.ndim == 2 else "RGB").save(path)


def read_image(path) -> np.ndarray:
    """PNG back to floats in [0, 1]; RGB stays (H, W, 3), grayscale (H, W)."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_label_map(path, labels: np.ndarray, palette: Optional[ClassPalette] = None,
                    ids_path=None) -> None:
    """Colorized label PNG plus a lossless raw class-id companion.

    The raw variant defaults to <path stem>_ids.png, one 8-bit channel of
    class ids.
    """
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise ValueError("labels out of range 0..27")
    palette = palette if palette is not None else ClassPalette.default()
    colors = palette.color_array()[labels.astype(np.int64)]
    Image.fromarray(colors, mode="RGB").save(path)
    path = Path(path)
    ids_file = Path(ids_path) if ids_path is not None else path.with_name(path.stem + "_ids.png")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(ids_file)


def read_label_map(path) -> np.ndarray:
    """Read a raw class-id PNG back to int64 labels."""
    img = Image.open(path)
    if img.mode != "L":
        raise ValueError("raw label maps are single-channel PNGs")
    return np.asarray(img, dtype=np.int64)


class ConfigError(ValueError):
    """Scene configuration failed strict validation."""


@dataclass
class CameraEntry:
    """One configured view: the camera plus optional supervision paths."""

    camera: Camera
    image: Optional[str] = None
    mask: Optional[str] = None
    labels: Optional[str] = None
    features: Optional[str] = None
    normals: Optional[str] = None


@dataclass
class SceneConfig:
    cameras: List[CameraEntry]
    loss: LossConfig
    render: RenderSettings
    activation: ActivationConfig
    splat: Optional[str] = None
    fit: Dict = field(default_factory=dict)


_CAMERA_KEYS = {"K", "R", "t", "width", "height", "image", "mask", "labels", "features", "normals"}
_LOSS_KEYS = {"lambda_mask", "lambda_perceptual", "lambda_dist", "lambda_seg", "k_v", "k_s"}
_RENDER_KEYS = {"background", "feature_dim", "tile_size", "alpha_cutoff", "early_stop"}
_ACTIVATION_KEYS = {"scale_min", "scale_max", "opacity_filter_threshold"}
_FIT_KEYS = {"steps", "lr", "lr_warmup", "schedule", "trainable", "lr_scale",
             "weight_decay", "init", "seed"}
_TOP_KEYS = {"cameras", "loss", "render", "activation", "splat", "fit"}


def _reject_unknown(mapping: dict, allowed: set, where: str) -> None:
    for key in mapping:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} at {where}")


def parse_scene_config(text: str) -> SceneConfig:
    """Strictly parse a JSON scene configuration.

    Unknown keys anywhere are rejected with their location; missing keys
    fall back to the documented defaults.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    _reject_unknown(doc, _TOP_KEYS, "top level")

    cameras_doc = doc.get("cameras", [])
    if not isinstance(cameras_doc, list):
        raise ConfigError("'cameras' must be a list")
    cameras: List[CameraEntry] = []
    for i, cam_doc in enumerate(cameras_doc):
        where = f"cameras[{i}]"
        if not isinstance(cam_doc, dict):
            raise ConfigError(f"{where} must be an object")
        _reject_unknown(cam_doc, _CAMERA_KEYS, where)
        for req in ("K", "R", "t", "width", "height"):
            if req not in cam_doc:
                raise ConfigError(f"missing key {req!r} at {where}")
        try:
            camera = Camera(K=np.array(cam_doc["K"], dtype=np.float64),
                            R=np.array(cam_doc["R"], dtype=np.float64),
                            t=np.array(cam_doc["t"], dtype=np.float64),
                            width=int(cam_doc["width"]), height=int(cam_doc["height"]))
        except ValueError as exc:
            raise ConfigError(f"invalid camera at {where}: {exc}") from exc
        cameras.append(CameraEntry(
            camera=camera,
            image=cam_doc.get("image"), mask=cam_doc.get("mask"),
            labels=cam_doc.get("labels"), features=cam_doc.get("features"),
            normals=cam_doc.get("normals"),
        ))

    loss_doc = doc.get("loss", {})
    _reject_unknown(loss_doc, _LOSS_KEYS, "loss")
    render_doc = doc.get("render", {})
    _reject_unknown(render_doc, _RENDER_KEYS, "render")
    act_doc = doc.get("activation", {})
    _reject_unknown(act_doc, _ACTIVATION_KEYS, "activation")
    fit_doc = doc.get("fit", {})
    _reject_unknown(fit_doc, _FIT_KEYS, "fit")

    try:
        loss = LossConfig(**{k: loss_doc[k] for k in loss_doc})
        render = RenderSettings(
            background=tuple(render_doc.get("background", (0.0, 0.0, 0.0))),
            feature_dim=render_doc.get("feature_dim"),
            tile_size=int(render_doc.get("tile_size", 16)),
            alpha_cutoff=float(render_doc.get("alpha_cutoff", 1.0 / 255.0)),
            early_stop=float(render_doc.get("early_stop", 1e-4)),
        )
        activation = ActivationConfig(**{k: act_doc[k] for k in act_doc})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    splat = doc.get("splat")
    return SceneConfig(cameras=cameras, loss=loss, render=render,
                       activation=activation, splat=splat, fit=dict(fit_doc))


def load_scene_config(path) -> SceneConfig:
    return parse_scene_config(Path(path).read_text())


def camera_to_dict(camera: Camera) -> dict:
    return {
        "K": camera.K.tolist(), "R": camera.R.tolist(), "t": camera.t.tolist(),
        "width": camera.width, "height": camera.height,
    }


def save_checkpoint(path, blocks: List[BlockWeights], bias: Optional[RelPosBias] = None,
                    patch_weight: Optional[np.ndarray] = None,
                    patch_bias: Optional[np.ndarray] = None,
                    head_weight: Optional[np.ndarray] = None,
                    head_bias: Optional[np.ndarray] = None) -> None:
    """Transformer weights to an .npz checkpoint."""
    arrays = {"n_blocks": np.array(len(blocks))}
    for i, b in enumerate(blocks):
        for name in ("wq", "wk", "wv", "wo", "attn_gain", "ffn_gain", "w1", "b1", "w2", "b2"):
            arrays[f"block{i}.{name}"] = getattr(b, name)
        arrays[f"block{i}.heads"] = np.array([b.n_heads, b.n_kv_heads])
    if bias is not None:
        arrays["bias.table"] = bias.table
        arrays["bias.grid"] = np.array([bias.grid_h, bias.grid_w])
    for name, arr in (("patch_weight", patch_weight), ("patch_bias", patch_bias),
                      ("head_weight", head_weight), ("head_bias", head_bias)):
        if arr is not None:
            arrays[name] = arr
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Checkpoint back to (blocks, bias, extras dict)."""
    data = np.load(path)
    blocks = []
    for i in range(int(data["n_blocks"])):
        heads = data[f"block{i}.heads"]
        blocks.append(BlockWeights(
            wq=data[f"block{i}.wq"], wk=data[f"block{i}.wk"], wv=data[f"block{i}.wv"],
            wo=data[f"block{i}.wo"], attn_gain=data[f"block{i}.attn_gain"],
            ffn_gain=data[f"block{i}.ffn_gain"], w1=data[f"block{i}.w1"],
            b1=data[f"block{i}.b1"], w2=data[f"block{i}.w2"], b2=data[f"block{i}.b2"],
            n_heads=int(heads[0]), n_kv_heads=int(heads[1]),
        ))
    bias = None
    if "bias.table" in data:
        grid = data["bias.grid"]
        bias = RelPosBias(table=data["bias.table"], grid_h=int(grid[0]), grid_w=int(grid[1]))
    extras = {k: data[k] for k in ("patch_weight", "patch_bias", "head_weight", "head_bias")
              if k in data}
    return blocks, bias, extras


def save_attention_cache(path, cache: AttentionCache) -> None:
    arrays = {
        "grid": np.array([cache.grid_h, cache.grid_w]),
        "n_entries": np.array(len(cache.entries)),
    }
    for i, entry in enumerate(cache.entries):
        arrays[f"entry{i}"] = entry
    if cache.bias_table is not None:
        arrays["bias_table"] = cache.bias_table
    np.savez(path, **arrays)


def load_attention_cache(path) -> AttentionCache:
    data = np.load(path)
    grid = data["grid"]
    cache = AttentionCache(grid_h=int(grid[0]), grid_w=int(grid[1]),
                           bias_table=data["bias_table"] if "bias_table" in data else None)
    for i in range(int(data["n_entries"])):
        cache.entries.append(data[f"entry{i}"])
    return cache


def write_loss_csv(path, trace) -> None:
    """Plain-text (step, loss) trace."""
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for i, value in enumerate(trace):
            fh.write(f"{i},{value:.10g}\n")
