"""Colour and shape measurements on rendered images (hue, foreground masks, blob counts)."""

from __future__ import annotations

import numpy as np
import torch
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage


def _hwc(image) -> np.ndarray:
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def foreground_mask(image, min_saturation: float = 0.35, min_value: float = 0.2) -> np.ndarray:
    """Saturated pixels; the synthetic backdrops are near-grey."""
    hsv = rgb_to_hsv(_hwc(image))
    return (hsv[..., 1] >= min_saturation) & (hsv[..., 2] >= min_value)


def mean_foreground_hue(image, min_saturation: float = 0.35) -> float:
    """Circular mean hue in degrees [0, 360) over the foreground; NaN if there is none."""
    rgb = _hwc(image)
    hsv = rgb_to_hsv(rgb)
    mask = foreground_mask(rgb, min_saturation)
    if not mask.any():
        return float("nan")
    ang = hsv[..., 0][mask] * 2 * np.pi
    w = hsv[..., 1][mask]
    mean = np.arctan2((w * np.sin(ang)).sum(), (w * np.cos(ang)).sum())
    return float(np.degrees(mean) % 360.0)


def hue_difference(a: float, b: float) -> float:
    """Signed circular difference a - b wrapped into (-180, 180]."""
    d = (a - b) % 360.0
    return d - 360.0 if d > 180.0 else d


def count_blobs(image, min_saturation: float = 0.35, min_pixels: int = 4) -> int:
    """Connected foreground components (8-connectivity) of at least ``min_pixels``."""
    mask = foreground_mask(image, min_saturation)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return 0
    sizes = np.bincount(labels.ravel())[1:]
    return int((sizes >= min_pixels).sum())


def is_monotone(values, tolerance: float = 1.0) -> bool:
    """True if successive steps never move against the net drift by more than ``tolerance``."""
    steps = np.diff(np.asarray(values, dtype=np.float64))
    net = steps.sum()
    if net == 0:
        return bool(np.all(np.abs(steps) <= tolerance))
    return bool(np.all(np.sign(net) * steps >= -tolerance))
