"""Grad-CAM heatmaps at a named tap layer, plus overlay rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass

import matplotlib
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from asffnet.backbones import Classifier
from asffnet.errors import ShapeError, ValidationError

COLORMAP = "jet"


@dataclass
class Heatmap:
    """Grad-CAM map upsampled to the input grid and min-max scaled to [0, 1].

    ``degenerate`` is set when the rectified map has no spread (typically all
    zeros); ``values`` is then all zeros instead of a division by zero.
    """

    values: np.ndarray
    raw: np.ndarray
    source_layer: str
    class_index: int
    raw_min: float
    raw_max: float
    degenerate: bool

    def argmax(self) -> tuple[int, int]:
        """(row, col) of the hottest pixel."""
        return tuple(int(v) for v in np.unravel_index(np.argmax(self.values), self.values.shape))

    def record(self) -> dict:
        return {
            "source_layer": self.source_layer,
            "class_index": self.class_index,
            "raw_min": self.raw_min,
            "raw_max": self.raw_max,
            "degenerate": self.degenerate,
        }


def gradcam(model: Classifier, image: torch.Tensor, class_index: int, layer: str | None = None) -> Heatmap:
    """Gradient-weighted class activation map for one preprocessed image.

    Channel weights are the spatial mean of d(logit[class_index]) / d(activation)
    at ``layer``; the map is ReLU(sum_c weight_c * activation_c).
    """
    x = image.unsqueeze(0) if image.dim() == 3 else image
    if x.dim() != 4 or x.shape[0] != 1:
        raise ShapeError(f"expected one image (3, H, W), got {tuple(image.shape)}")
    num_classes = model.spec.num_classes
    if not 0 <= class_index < num_classes:
        raise ValidationError(f"class_index {class_index} out of range for {num_classes} classes")
    tap = model.tap(layer or model.default_cam_layer)

    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            x = x.detach().clone().requires_grad_(True)
            result = model.run(x)
            act = result.taps[tap.name]
            (grad,) = torch.autograd.grad(
                result.logits[0, class_index], act, allow_unused=True
            )
    finally:
        model.train(was_training)
    if grad is None:
        grad = torch.zeros_like(act)

    with torch.no_grad():
        weights = grad.mean(dim=(2, 3), keepdim=True)
        cam = F.relu((weights * act).sum(dim=1, keepdim=True))
        up = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0]
    raw = cam[0, 0].double().numpy()
    up = up.double().numpy()
    lo, hi = float(up.min()), float(up.max())
    degenerate = not hi - lo > 0
    values = np.zeros_like(up) if degenerate else (up - lo) / (hi - lo)
    return Heatmap(values, raw, tap.name, class_index, float(raw.min()), float(raw.max()), degenerate)


@dataclass
class Overlay:
    image: np.ndarray  # (H, W, 3) uint8
    blend_alpha: float


def colorize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] values through the fixed colormap; float RGB in [0, 255]."""
    return matplotlib.colormaps[COLORMAP](values)[..., :3] * 255.0


def overlay(image: np.ndarray, heatmap: Heatmap, blend_alpha: float = 0.4) -> Overlay:
    """Alpha-blend the colorized heatmap onto an RGB uint8 image."""
    if not 0 < blend_alpha < 1:
        raise ValidationError(f"blend_alpha must be in (0, 1), got {blend_alpha}")
    base = np.asarray(image)
    if base.shape[:2] != heatmap.values.shape or base.ndim != 3:
        raise ShapeError(
            f"heatmap {heatmap.values.shape} does not match image {base.shape}"
        )
    mixed = (1 - blend_alpha) * base.astype(np.float64) + blend_alpha * colorize(heatmap.values)
    return Overlay(np.clip(np.rint(mixed), 0, 255).astype(np.uint8), blend_alpha)


def to_display(image: torch.Tensor, mean, std) -> np.ndarray:
    """Undo normalisation of a (3, H, W) tensor; returns (H, W, 3) uint8."""
    m = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    s = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    rgb = (image * s + m).clamp(0, 1).permute(1, 2, 0).double().numpy()
    return np.rint(rgb * 255).astype(np.uint8)


def save_heatmap_png(path, heatmap: Heatmap) -> None:
    Image.fromarray(np.rint(heatmap.values * 255).astype(np.uint8), "L").save(path)


def save_overlay_png(path, ov: Overlay) -> None:
    Image.fromarray(ov.image, "RGB").save(path)


def write_record(path, record: dict) -> None:
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
