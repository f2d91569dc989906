"""Error-overlay rendering: predicted water in blue, over-predictions in
green, missed water in red, correct background untouched."""

from __future__ import annotations

import numpy as np

TP_COLOR = (0, 0, 255)
FP_COLOR = (0, 255, 0)
FN_COLOR = (255, 0, 0)


def render_overlay(image: np.ndarray, pred_mask: np.ndarray, gt_mask: np.ndarray,
                   alpha: float = 0.5) -> np.ndarray:
    """Blend class colors into the image: out = (1-alpha)*pixel + alpha*color.

    The blend is truncated to uint8 (x.5 rounds down), so alpha=0.5 on
    mid-gray 128 gives channel values 64/191 exactly. Every pixel belongs to
    exactly one of the four classes; TN pixels pass through unchanged.
    """
    img = np.asarray(image)
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if img.shape[:2] != pred.shape or pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: image {img.shape[:2]}, "
                         f"pred {pred.shape}, gt {gt.shape}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be (H,W,3), got {img.shape}")

    out = img.astype(np.float64).copy()
    for region, color in (((pred & gt), TP_COLOR),
                          ((pred & ~gt), FP_COLOR),
                          ((~pred & gt), FN_COLOR)):
        out[region] = (1.0 - alpha) * out[region] + alpha * np.asarray(color, dtype=np.float64)
    return out.astype(np.uint8)
