"""3D gradient-weighted class activation maps, hookable at any named layer.

For a chosen class c and feature layer with activations A (C, D', H', W'),
the per-channel importance weights are the global average of the class
logit's gradient over the layer map,
    weight_k = (1/Z) * sum_{d,h,w} d logit_c / d A[k, d, h, w],
with Z the voxel count of the map, and the heatmap is the ReLU-clamped
weighted channel sum, upsampled trilinearly to the input resolution. The
logit is taken pre-softmax so the gradient cannot vanish through a saturated
softmax.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .architectures import Model
from .data_io import write_volume
from .tensor import trilinear_upsample


@dataclass
class GradCamResult:
    layer_name: str
    class_index: int
    unit_weights: np.ndarray   # (C,)
    heatmap: np.ndarray        # (D', H', W'), >= 0
    upsampled: np.ndarray      # (D, H, W) at input resolution, >= 0
    voxel_count: int           # Z = D' * H' * W'


def channel_weighted_map(acts: np.ndarray, grads: np.ndarray):
    """Weights and clamped map from one sample's activations and gradients,
    both shaped (C, D', H', W')."""
    unit_weights = grads.mean(axis=(1, 2, 3))
    heatmap = np.maximum(np.tensordot(unit_weights, acts, axes=1), 0)
    return unit_weights, heatmap


def compute_gradcam(model: Model, x: np.ndarray, class_index: int,
                    layer_name: str) -> GradCamResult:
    """Explain a single volume's class logit at the named feature layer."""
    if x.ndim != 5 or x.shape[0] != 1:
        raise ValueError(f"expected a single volume (1,C,D,H,W), got {x.shape}")
    n_classes = model.spec.num_classes
    if not 0 <= class_index < n_classes:
        raise ValueError(f"class index {class_index} outside [0, {n_classes})")
    if layer_name not in model.feature_layer_names():
        raise ValueError(f"layer {layer_name!r} is not a feature layer; "
                         f"available: {', '.join(model.feature_layer_names())}")
    model.forward(x, mode="eval")
    acts = model.recorded_output(layer_name)
    grad_logits = np.zeros((1, n_classes), dtype=acts.dtype)
    grad_logits[0, class_index] = 1
    grads = model.backward_to(layer_name, grad_logits)

    a = acts[0]    # (C, D', H', W')
    g = grads[0]
    z = a.shape[1] * a.shape[2] * a.shape[3]
    unit_weights, heatmap = channel_weighted_map(a, g)
    upsampled = trilinear_upsample(heatmap, x.shape[2:])
    return GradCamResult(layer_name, class_index, unit_weights, heatmap,
                         upsampled, z)


def normalize_heatmap(heatmap: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] by the global max; an all-zero map stays zero."""
    peak = float(heatmap.max()) if heatmap.size else 0.0
    if peak <= 0:
        return np.zeros_like(heatmap, dtype=np.float32)
    return (heatmap / np.float32(peak)).astype(np.float32)


def _slice_panel(volume: np.ndarray, heat: np.ndarray) -> np.ndarray:
    """RGB center-slice montage (axial | coronal | sagittal) with the heatmap
    overlaid in red on the grayscale volume."""
    def to_unit(a):
        lo, hi = float(a.min()), float(a.max())
        return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)

    vol = to_unit(volume.astype(np.float32))
    d, h, w = vol.shape
    panels = []
    for base, overlay in (
        (vol[d // 2], heat[d // 2]),
        (vol[:, h // 2], heat[:, h // 2]),
        (vol[:, :, w // 2], heat[:, :, w // 2]),
    ):
        rgb = np.stack([base, base, base], axis=-1)
        alpha = np.clip(overlay, 0, 1)[..., None]
        red = np.zeros_like(rgb)
        red[..., 0] = 1.0
        panels.append((1 - 0.6 * alpha) * rgb + 0.6 * alpha * red)
    height = max(p.shape[0] for p in panels)
    padded = []
    for p in panels:
        pad = height - p.shape[0]
        padded.append(np.pad(p, ((0, pad), (0, 0), (0, 0))))
    montage = np.concatenate(padded, axis=1)
    return (montage * 255).astype(np.uint8)


def export_heatmap(result: GradCamResult, volume_path: str,
                   montage_path: str, base_volume: np.ndarray | None = None):
    """Write the [0,1]-normalized input-resolution heatmap as a volume file
    and a PNG montage of the three center slices."""
    from PIL import Image

    normalized = normalize_heatmap(result.upsampled)
    write_volume(volume_path, normalized)
    base = base_volume if base_volume is not None else np.zeros_like(normalized)
    if base.ndim == 5:
        base = base[0, 0]
    elif base.ndim == 4:
        base = base[0]
    img = _slice_panel(base, normalized)
    os.makedirs(os.path.dirname(os.path.abspath(montage_path)), exist_ok=True)
    Image.fromarray(img).save(montage_path)
    return volume_path, montage_path


def peak_region(result: GradCamResult, top_fraction: float) -> list[tuple[int, int, int]]:
    """Voxel coordinates carrying the top fraction of input-resolution
    heatmap mass: voxels sorted by value (descending, coordinate order on
    ties) are taken until their cumulative mass reaches
    top_fraction * total. An all-zero map yields no voxels."""
    if not 0 < top_fraction <= 1:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    heat = result.upsampled
    total = float(heat.sum())
    if total <= 0:
        return []
    flat = heat.ravel()
    order = np.argsort(-flat, kind="stable")
    target = top_fraction * total
    cum = np.cumsum(flat[order])
    take = int(np.searchsorted(cum, target, side="left")) + 1
    take = min(take, flat.size)
    coords = np.unravel_index(order[:take], heat.shape)
    return [tuple(int(c) for c in xyz) for xyz in zip(*coords)]


def write_peak_report(result: GradCamResult, path: str, top_fraction: float = 0.05):
    coords = peak_region(result, top_fraction)
    arr = np.array(coords) if coords else np.zeros((0, 3), dtype=int)
    report = {
        "layer": result.layer_name,
        "class_index": result.class_index,
        "top_fraction": top_fraction,
        "voxel_count": len(coords),
        "bbox_lo": arr.min(axis=0).tolist() if len(coords) else None,
        "bbox_hi": arr.max(axis=0).tolist() if len(coords) else None,
        "coords": [list(c) for c in coords[:1000]],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
    return report
