"""Token-level overlays: red mask on tokens the teacher calls distressed, plus a distress heatmap."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import load_png, save_png, to_uint8

RED = np.array([1.0, 0.0, 0.0])
ALPHA = 0.45


def token_footprints(grid_side: int, pixels: int) -> list[tuple[int, int, int, int]]:
    """(top, left, height, width) of each token's footprint, row-major."""
    return [(r * pixels, c * pixels, pixels, pixels) for r in range(grid_side) for c in range(grid_side)]


def upsample(values: np.ndarray, grid_side: int, pixels: int) -> np.ndarray:
    """Repeat each token value over its footprint: [m] -> [g*p, g*p]."""
    grid = np.asarray(values).reshape(grid_side, grid_side)
    return np.repeat(np.repeat(grid, pixels, axis=0), pixels, axis=1)


def teacher_token_probs(model, images: np.ndarray) -> np.ndarray:
    """Teacher patch probabilities, [B, m, C]."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    with T.no_grad():
        return model.pair.teacher_predict(images).probs.data.astype(np.float64)


def token_mask(probs: np.ndarray, normal_class: int = 0) -> np.ndarray:
    """Tokens whose most likely class is not normal."""
    return np.argmax(probs, axis=-1) != normal_class


def overlay(image: np.ndarray, mask_px: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64).copy()
    out[mask_px] = (1 - alpha) * out[mask_px] + alpha * RED
    return out


def heat_colors(v: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white ramp for values in [0, 1]."""
    v = np.clip(v, 0.0, 1.0)[..., None]
    return np.clip(np.concatenate([3 * v, 3 * v - 1, 3 * v - 2], axis=-1), 0.0, 1.0)


def render(model, image: np.ndarray, normal_class: int = 0):
    """Returns (overlay image, heatmap image, token mask [g, g]) at the input's size."""
    bcfg = model.cfg.backbone
    g, px = bcfg.grid_side, bcfg.receptive_patch_pixels
    if image.shape[:2] != (g * px, g * px):
        raise ValueError(f"image is {image.shape[:2]}, model expects {(g * px, g * px)}")
    probs = teacher_token_probs(model, image)[0]
    mask = token_mask(probs, normal_class)
    over = overlay(image, upsample(mask, g, px))
    heat = heat_colors(upsample(1.0 - probs[:, normal_class], g, px))
    return over, heat, mask.reshape(g, g)


def visualize(model, paths, out_dir, normal_class: int = 0) -> list[Path]:
    """Write ``<stem>_overlay.png`` and ``<stem>_heat.png`` for each input image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for p in map(Path, paths):
        over, heat, _ = render(model, load_png(p), normal_class)
        for suffix, img in (("overlay", over), ("heat", heat)):
            dst = out / f"{p.stem}_{suffix}.png"
            save_png(dst, to_uint8(img))
            written.append(dst)
    return written
