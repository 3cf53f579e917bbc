"""Class activation maps and RGB visualizations.

A class activation map weights the final-stage feature maps by the head's
weights for one class and sums over channels; because the head sits on a
global average pool, the spatial mean of that raw map equals the class
logit minus the head bias. The raw (coarse) map is bilinearly upsampled to
the input size and min-max normalized to [0, 1]; maps with no variation
normalize to all zeros and are flagged.

For viewing, patches render as RGB composites (B04, B03, B02 with a
percentile contrast stretch) and heatmaps blend over them with a
perceptually uniform colormap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import NormStats, normalize
from .errors import ConfigError
from .model import ModelParams, feature_maps, head_bias, predict_logits
from .patches import BAND_ORDER, Patch
from .resample import resize_bilinear


@dataclass
class CAMResult:
    """One class activation map with its provenance."""

    heatmap: np.ndarray  # (H, W) in [0, 1]
    class_index: int
    logit: float
    raw_map: np.ndarray  # (h, w) pre-upsampling
    constant: bool  # True when the raw map had no variation


def compute_cam(params: ModelParams, cube: np.ndarray, class_index: int) -> CAMResult:
    """Activation map of one class for one normalized input cube."""
    num_classes = params.spec.num_classes
    if not 0 <= class_index < num_classes:
        raise ConfigError(
            f"class index {class_index} outside [0, {num_classes})"
        )
    activations, head_w = feature_maps(params, cube)
    raw = np.tensordot(head_w[class_index].astype(np.float64),
                       activations.astype(np.float64), axes=1)
    logit = float(raw.mean() + head_bias(params)[class_index])
    up = resize_bilinear(raw.astype(np.float32), cube.shape[1], cube.shape[2])
    up = up.astype(np.float64)
    lo = float(up.min())
    hi = float(up.max())
    if hi > lo:
        heatmap = (up - lo) / (hi - lo)
        constant = False
    else:
        heatmap = np.zeros_like(up)
        constant = True
    return CAMResult(
        heatmap=heatmap,
        class_index=class_index,
        logit=logit,
        raw_map=raw,
        constant=constant,
    )


DEFAULT_STRETCH = (2.0, 98.0)
_RGB_BANDS = ("B04", "B03", "B02")


def rgb_composite(patch, stretch: tuple[float, float] = DEFAULT_STRETCH) -> np.ndarray:
    """(H, W, 3) uint8 true-color rendering with percentile stretch.

    Accepts a :class:`Patch` or a raw (10, H, W) cube in canonical band
    order. Constant channels map to mid-gray.
    """
    cube = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    if cube.ndim != 3 or cube.shape[0] != len(BAND_ORDER):
        raise ConfigError(f"expected (10, H, W) cube, got shape {cube.shape}")
    lo_pct, hi_pct = stretch
    planes = []
    for name in _RGB_BANDS:
        plane = cube[BAND_ORDER.index(name)].astype(np.float64)
        lo, hi = np.percentile(plane, [lo_pct, hi_pct])
        if hi > lo:
            scaled = (plane - lo) / (hi - lo)
        else:
            scaled = np.full_like(plane, 0.5)
        planes.append(np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8))
    return np.stack(planes, axis=-1)


def heatmap_image(heatmap: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 colormap rendering of a [0, 1] heatmap."""
    import matplotlib

    cmap = matplotlib.colormaps["viridis"]
    rgba = cmap(np.clip(heatmap, 0.0, 1.0))
    return np.clip(np.round(rgba[..., :3] * 255.0), 0, 255).astype(np.uint8)


def overlay(rgb: np.ndarray, cam: CAMResult, alpha: float = 0.5) -> np.ndarray:
    """Blend the colormapped heatmap over an RGB image at opacity alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha {alpha} outside [0, 1]")
    if rgb.shape[:2] != cam.heatmap.shape:
        raise ConfigError(
            f"image size {rgb.shape[:2]} != heatmap size {cam.heatmap.shape}"
        )
    colored = heatmap_image(cam.heatmap).astype(np.float64)
    blended = (1.0 - alpha) * rgb.astype(np.float64) + alpha * colored
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def explain_patch(
    params: ModelParams,
    patch: Patch,
    stats: NormStats,
    out_dir: str | Path,
    class_index: int | None = None,
    class_names: list[str] | None = None,
    alpha: float = 0.5,
) -> dict:
    """Write the rgb/cam/overlay image triple plus a JSON sidecar.

    ``class_index=None`` explains the model's own argmax prediction.
    Returns the sidecar record (paths, class, logit, flags).
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x = normalize(patch.data, stats)
    logits = predict_logits(params, x[None])[0]
    predicted = int(np.argmax(logits))
    target = predicted if class_index is None else class_index
    cam = compute_cam(params, x, target)

    rgb = rgb_composite(patch)
    blend = overlay(rgb, cam, alpha)
    paths = {}
    for kind, image in (
        ("rgb", rgb), ("cam", heatmap_image(cam.heatmap)), ("overlay", blend)
    ):
        path = out_dir / f"{patch.patch_id}_{kind}.png"
        Image.fromarray(image).save(path)
        paths[kind] = path.name

    record = {
        "patch_id": patch.patch_id,
        "class_index": cam.class_index,
        "class_name": (
            class_names[cam.class_index] if class_names is not None else None
        ),
        "predicted_index": predicted,
        "logit": cam.logit,
        "constant_map": cam.constant,
        "alpha": alpha,
        "files": paths,
    }
    sidecar = out_dir / f"{patch.patch_id}_cam.json"
    sidecar.write_text(json.dumps(record, indent=2), encoding="utf-8")
    return record
