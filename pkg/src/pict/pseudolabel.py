"""Prior-based patch pseudo labels: relative distress threshold plus patch filter.

All functions accept either one image (``probs`` of shape ``[m, C]``) or a
batch (``[B, m, C]`` with one label per image).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DISTRESSED_KEEP = 0.5
NORMAL_KEEP = 0.95


@dataclass
class PatchPseudoLabels:
    labels: np.ndarray
    keep_mask: np.ndarray
    delta_rel: float
    normal_class: int = 0

    def kept(self) -> np.ndarray:
        """Number of kept patches per image (scalar for a single image)."""
        return self.keep_mask.sum(axis=-1)


def _probs(preds) -> np.ndarray:
    probs = getattr(preds, "probs", preds)
    probs = getattr(probs, "data", probs)
    return np.asarray(probs, dtype=np.float64)


def _image_labels(image_label, batch: int | None) -> np.ndarray:
    lab = np.asarray(image_label)
    if batch is None:
        if lab.ndim != 0:
            raise ValueError(
                f"one class index per image expected, got {lab.tolist()}; multi-distress images are not supported"
            )
        return lab.astype(np.int64).reshape(1)
    if lab.shape != (batch,):
        raise ValueError(
            f"expected {batch} scalar class indices, got shape {lab.shape}; multi-distress images are not supported"
        )
    return lab.astype(np.int64)


def distress_count(delta_rel: float, m: int) -> int:
    """ceil(delta_rel * m), guarded against float round-up (0.35 * 20 -> 7.000000000000001)."""
    return min(m, math.ceil(round(delta_rel * m, 9)))


def relative_distress_threshold(teacher_preds, image_label, is_distressed=None,
                                delta_rel: float = 0.25, normal_class: int = 0) -> np.ndarray:
    """Label the top ``ceil(delta_rel*m)`` tokens by distress-class probability.

    Ties go to the lower token index. Non-distressed images get all-normal
    labels.
    """
    if not 0.0 < delta_rel <= 1.0:
        raise ConfigError(f"delta_rel must lie in (0, 1], got {delta_rel}")
    probs = _probs(teacher_preds)
    single = probs.ndim == 2
    if single:
        probs = probs[None]
    b, m, _ = probs.shape
    labels = _image_labels(image_label, None if single else b)
    if is_distressed is None:
        distressed = labels != normal_class
    else:
        distressed = np.asarray(is_distressed, dtype=bool).reshape(-1)
    q = distress_count(delta_rel, m)

    out = np.full((b, m), normal_class, dtype=np.int64)
    for i in np.flatnonzero(distressed):
        scores = probs[i, :, labels[i]]
        top = np.argsort(-scores, kind="stable")[:q]
        out[i, top] = labels[i]
    return out[0] if single else out


def patch_filter(teacher_preds, labels, is_distressed, normal_class: int = 0,
                 distressed_keep: float = DISTRESSED_KEEP, normal_keep: float = NORMAL_KEEP) -> np.ndarray:
    """Boolean keep-mask over tokens.

    Distressed image: keep distress-labelled tokens and normal-labelled tokens
    with p(normal) > ``distressed_keep``. Normal image: keep tokens with
    p(normal) > ``normal_keep``.
    """
    probs = _probs(teacher_preds)
    labels = np.asarray(labels)
    single = probs.ndim == 2
    if single:
        probs, labels = probs[None], labels[None]
    distressed = np.asarray(is_distressed, dtype=bool).reshape(-1, 1)
    p_normal = probs[..., normal_class]
    keep_dis = (labels != normal_class) | (p_normal > distressed_keep)
    keep_nor = p_normal > normal_keep
    mask = np.where(distressed, keep_dis, keep_nor)
    return mask[0] if single else mask


def generate(teacher_preds, image_label, delta_rel: float, normal_class: int = 0,
             distressed_keep: float = DISTRESSED_KEEP, normal_keep: float = NORMAL_KEEP) -> PatchPseudoLabels:
    """Relative distress threshold followed by the patch filter."""
    distressed = np.asarray(image_label) != normal_class
    labels = relative_distress_threshold(teacher_preds, image_label, distressed, delta_rel, normal_class)
    mask = patch_filter(teacher_preds, labels, distressed, normal_class, distressed_keep, normal_keep)
    return PatchPseudoLabels(labels, mask, delta_rel, normal_class)
