"""Attention visualizations: spatial-gate heatmaps from attention-equipped
variants and gradient-weighted class activation maps for any variant, both
upsampled to input resolution and overlaid on the source image."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import encode_ppm, resize_bilinear

METHODS = ("spatial-gate", "gradcam")


def _forward_capture(model, img_norm):
    x = T.Tensor(img_norm[None].astype(np.float32))
    capture = {}
    logits = model.forward(x, capture=capture)
    return logits, capture


def _last_gate_key(capture, stage, kind):
    keys = sorted(k for k in capture
                  if k.startswith(f"stage{stage}.") and k.endswith(kind))
    return keys[-1] if keys else None


def spatial_gate_map(model, img_norm, stage=None):
    """The [H,W] spatial attention gate of a stage's last attention block,
    bilinear-upsampled to input resolution. Values are already in (0,1)."""
    model.eval()
    with T.no_grad():
        _, capture = _forward_capture(model, img_norm)
    stages = [stage] if stage is not None else [5, 4, 3, 2]
    for s in stages:
        key = _last_gate_key(capture, s, "spatial_gate")
        if key is not None:
            gate = capture[key]  # [1,1,h,w]
            gmap = gate[0]
            return resize_bilinear(gmap, img_norm.shape[1:])[0]
    raise ValueError("model has no spatial attention gate"
                     + (f" in stage {stage}" if stage is not None else ""))


def gradcam_map(model, img_norm, stage=5, target_class=None):
    """relu of the gradient-channel-weighted stage activation, min-max
    scaled to [0,1] (an all-zero map stays zero), at input resolution."""
    model.eval()
    logits, capture = _forward_capture(model, img_norm)
    if target_class is None:
        target_class = int(logits.data[0].argmax())
    if not 0 <= target_class < logits.shape[1]:
        raise ValueError(f"class {target_class} out of range")
    act = capture[f"stage{stage}"]
    score = logits[0, target_class]
    score.backward()
    grads = act.grad[0]          # [C,h,w]
    acts = act.data[0]
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > cam.min():
        cam = (cam - cam.min()) / (peak - cam.min())
    else:
        cam = np.zeros_like(cam)
    return np.clip(resize_bilinear(cam[None], img_norm.shape[1:])[0], 0.0, 1.0)


def colormap(values):
    """3-stop linear map blue -> yellow -> red over [0,1]; returns [3,...]."""
    v = np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0)
    lo = v <= 0.5
    u = np.where(lo, 2.0 * v, 2.0 * v - 1.0)
    r = np.where(lo, u, 1.0)
    g = np.where(lo, u, 1.0 - u)
    b = np.where(lo, 1.0 - u, 0.0)
    return np.stack([r, g, b])


def overlay(img, heat):
    """0.5 * grayscale(img) + 0.5 * colormap(heat); both at image size."""
    if heat.shape != img.shape[1:]:
        raise ValueError(f"map extents {heat.shape} != image extents {img.shape[1:]}")
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return 0.5 * gray[None] + 0.5 * colormap(heat)


def overlay_emit(img, heat, path):
    """Write the blended overlay as a P6 file."""
    blended = overlay(img, heat)
    with open(path, "wb") as fh:
        fh.write(encode_ppm(blended))
    return path
