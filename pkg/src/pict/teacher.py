"""Patch labeling teacher: student/teacher patch classifiers kept in sync by EMA."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, TokenGrid
from .errors import ConfigError
from .nn import Linear, Module
from .pseudolabel import PatchPseudoLabels
from .tensor import Tensor


@dataclass
class PatchPredictions:
    logits: Tensor
    probs: Tensor
    source: str = "student"


class PatchModel(Module):
    """Backbone followed by a linear patch head, one prediction per token."""

    def __init__(self, backbone: Backbone, num_classes: int, rng):
        super().__init__()
        self.backbone = backbone
        self.patch_head = Linear(backbone.cfg.token_dim, num_classes, rng)

    def forward(self, images) -> tuple[TokenGrid, PatchPredictions]:
        grid = self.backbone(images)
        return grid, patch_head_forward(self.patch_head, grid)


def patch_head_forward(head: Linear, tokens: TokenGrid | Tensor, source: str = "student") -> PatchPredictions:
    t = tokens.tokens if isinstance(tokens, TokenGrid) else tokens
    logits = head(t)
    return PatchPredictions(logits, T.softmax_rows(logits), source)


class ModelPair:
    """Student and EMA teacher. The teacher starts as an exact copy of the student."""

    def __init__(self, student: PatchModel, lam: float = 0.999):
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1], got {lam}")
        self.student = student
        self.teacher = copy.deepcopy(student)
        for p in self.teacher.parameters():
            p.requires_grad = False
            p.grad = None
        self.lam = lam

    def teacher_predict(self, images) -> PatchPredictions:
        with T.no_grad():
            _, preds = self.teacher(images)
        preds.source = "teacher"
        return preds


def ema_update(pair: ModelPair) -> None:
    """teacher <- lam * teacher + (1 - lam) * student, elementwise."""
    lam = pair.lam
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1], got {lam}")
    for t, s in zip(pair.teacher.parameters(), pair.student.parameters()):
        if t.shape != s.shape:
            raise T.ShapeError(f"teacher {t.shape} vs student {s.shape}")
        if lam == 0.0:
            t.data[...] = s.data
        elif lam != 1.0:
            # one rounding to storage precision
            t.data[...] = lam * t.data.astype(np.float64) + (1.0 - lam) * s.data.astype(np.float64)


def patch_loss(student_preds: PatchPredictions, pseudo: PatchPseudoLabels) -> Tensor | None:
    """Cross-entropy against pseudo labels, averaged over kept patches.

    Each image contributes the mean over its kept patches; images without kept
    patches are skipped. Returns ``None`` when nothing is kept at all, in which
    case the caller trains on the image loss alone.
    """
    logits = student_preds.logits
    c = logits.shape[-1]
    mask = np.asarray(pseudo.keep_mask, dtype=bool).reshape(-1, logits.shape[-2])
    labels = np.asarray(pseudo.labels).reshape(-1)
    kept = mask.sum(axis=1)
    valid = kept > 0
    if not valid.any():
        return None
    weights = np.where(valid[:, None], mask / np.maximum(kept, 1)[:, None], 0.0) / valid.sum()
    return T.weighted_cross_entropy(logits.reshape(-1, c), labels, weights.reshape(-1))


# -- strong augmentation ------------------------------------------------------

@dataclass(frozen=True)
class AugmentPlan:
    hflip: bool
    vflip: bool
    brightness: float
    contrast: float
    erase: tuple  # (top, left, height, width)


def augment_plan(seed: int, height: int, width: int, jitter: float = 0.3,
                 max_erase: float = 0.25) -> AugmentPlan:
    rng = np.random.default_rng(seed)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    brightness = float(rng.uniform(1 - jitter, 1 + jitter))
    contrast = float(rng.uniform(1 - jitter, 1 + jitter))
    area = rng.uniform(0.02, max_erase) * height * width
    aspect = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    eh = int(min(height, max(1, round(np.sqrt(area * aspect)))))
    ew = int(min(width, max(1, round(np.sqrt(area / aspect)))))
    while eh * ew > max_erase * height * width:
        if eh >= ew:
            eh -= 1
        else:
            ew -= 1
    top = int(rng.integers(0, height - eh + 1))
    left = int(rng.integers(0, width - ew + 1))
    return AugmentPlan(hflip, vflip, brightness, contrast, (top, left, eh, ew))


def apply_plan(image: np.ndarray, plan: AugmentPlan, fill: float = 0.5) -> np.ndarray:
    x = np.asarray(image, dtype=np.float32)
    if plan.hflip:
        x = x[:, ::-1]
    if plan.vflip:
        x = x[::-1]
    x = np.clip(x * plan.brightness, 0.0, 1.0)
    mu = x.mean(dtype=np.float64)
    x = np.clip((x - mu) * plan.contrast + mu, 0.0, 1.0)
    x = np.ascontiguousarray(x, dtype=np.float32)
    top, left, h, w = plan.erase
    x[top:top + h, left:left + w] = fill
    return x


def strong_augment(image: np.ndarray, seed: int) -> np.ndarray:
    """Seeded flips, brightness/contrast jitter and one random erase, clamped to [0, 1]."""
    image = np.asarray(image)
    return apply_plan(image, augment_plan(seed, image.shape[0], image.shape[1]))


def flip_token_grid(values: np.ndarray, plan: AugmentPlan, grid: int) -> np.ndarray:
    """Move per-token values ([..., m]) to where the plan's flips put their tokens."""
    v = np.asarray(values).reshape(*np.shape(values)[:-1], grid, grid)
    if plan.hflip:
        v = v[..., :, ::-1]
    if plan.vflip:
        v = v[..., ::-1, :]
    return np.ascontiguousarray(v).reshape(np.shape(values))
