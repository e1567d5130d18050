import math

import numpy as np
import pytest

from pict import tensor as T
from pict.backbone import Backbone, BackboneConfig
from pict.errors import ConfigError
from pict.nn import Linear
from pict.pseudolabel import PatchPseudoLabels
from pict.teacher import (
    ModelPair,
    PatchModel,
    PatchPredictions,
    augment_plan,
    ema_update,
    flip_token_grid,
    patch_head_forward,
    patch_loss,
    strong_augment,
)
from pict.tensor import Tensor

TINY = BackboneConfig(image_size=16, patch_size=4, embed_dim=8, depths=(1, 1), heads=(1, 2),
                      window=2, num_stages=2)


def _pair(lam=0.9, dtype=np.float32):
    with T.default_dtype(dtype):
        rng = np.random.default_rng(0)
        return ModelPair(PatchModel(Backbone(TINY, rng), 2, rng), lam)


def test_zero_head_gives_uniform_rows():
    head = Linear(6, 3, np.random.default_rng(0))
    head.weight.data[:] = 0
    out = patch_head_forward(head, Tensor(np.random.default_rng(1).normal(size=(16, 6))))
    np.testing.assert_allclose(out.probs.data, 1 / 3, atol=1e-7)


def test_patch_predictions_shape():
    pair = _pair()
    _, preds = pair.student(np.random.default_rng(0).random((16, 16, 3)))
    assert preds.probs.shape == (4, 2)
    np.testing.assert_allclose(preds.probs.data.sum(1), 1.0, atol=1e-6)


def test_head_matches_linear_softmax_oracle():
    rng = np.random.default_rng(2)
    with T.default_dtype(np.float64):
        head = Linear(5, 2, rng)
        head.weight.data[:] = rng.normal(size=(5, 2))
        head.bias.data[:] = rng.normal(size=2)
        toks = rng.normal(size=(16, 5))
        got = patch_head_forward(head, Tensor(toks)).probs.data
    z = toks @ head.weight.data + head.bias.data
    expected = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_teacher_starts_as_exact_copy():
    pair = _pair()
    for t, s in zip(pair.teacher.parameters(), pair.student.parameters()):
        np.testing.assert_array_equal(t.data, s.data)
        assert t is not s and not t.requires_grad


def _set_student(pair, value):
    for p in pair.student.parameters():
        p.data[...] = value


def test_ema_lambda_one_keeps_teacher():
    pair = _pair(1.0)
    before = [t.data.copy() for t in pair.teacher.parameters()]
    _set_student(pair, 5.0)
    ema_update(pair)
    for b, t in zip(before, pair.teacher.parameters()):
        np.testing.assert_array_equal(b, t.data)


def test_ema_lambda_zero_copies_student():
    pair = _pair(0.0)
    for p in pair.student.parameters():
        p.data[...] = np.random.default_rng(3).normal(size=p.shape)
    ema_update(pair)
    for t, s in zip(pair.teacher.parameters(), pair.student.parameters()):
        assert t.data.tobytes() == s.data.tobytes()


def test_ema_hand_value():
    pair = _pair(0.9, np.float64)
    for t in pair.teacher.parameters():
        t.data[...] = 1.0
    _set_student(pair, 2.0)
    ema_update(pair)
    for t in pair.teacher.parameters():
        np.testing.assert_allclose(t.data, 1.1, atol=1e-12)


def test_ema_student_untouched():
    pair = _pair(0.5)
    before = [p.data.copy() for p in pair.student.parameters()]
    ema_update(pair)
    for b, p in zip(before, pair.student.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_ema_rejects_bad_lambda():
    with pytest.raises(ConfigError):
        _pair(1.5)
    pair = _pair()
    pair.lam = -0.1
    with pytest.raises(ConfigError):
        ema_update(pair)


def test_ema_contraction_50_steps():
    lam = 0.9
    pair = _pair(lam, np.float64)
    rng = np.random.default_rng(4)
    for p in pair.student.parameters():
        p.data[...] = rng.normal(size=p.shape)
    gaps = [np.abs(t.data - s.data) for t, s in zip(pair.teacher.parameters(), pair.student.parameters())]
    for _ in range(50):
        ema_update(pair)
    for g0, t, s in zip(gaps, pair.teacher.parameters(), pair.student.parameters()):
        assert np.all(np.abs(t.data - s.data) <= lam**50 * g0 + 1e-6)


def _preds(logits):
    lt = Tensor(logits, requires_grad=True)
    return PatchPredictions(lt, T.softmax_rows(lt)), lt


def test_patch_loss_confident():
    preds, _ = _preds(np.array([[20.0, -20.0], [-20.0, 20.0]]))
    pseudo = PatchPseudoLabels(np.array([0, 1]), np.array([True, True]), 0.25)
    assert patch_loss(preds, pseudo).item() < 1e-4


def test_patch_loss_uniform():
    preds, _ = _preds(np.zeros((4, 2)))
    pseudo = PatchPseudoLabels(np.array([0, 1, 0, 0]), np.ones(4, bool), 0.25)
    assert patch_loss(preds, pseudo).item() == pytest.approx(math.log(2), abs=1e-6)


def test_patch_loss_mean_over_kept():
    logits = np.array([[1.0, 0.0], [0.2, 0.7], [3.0, -1.0], [0.0, 2.0]])
    labels = np.array([0, 1, 1, 0])
    mask = np.array([False, True, False, True])

    def ce(row, t):
        return -(row[t] - math.log(sum(math.exp(v) for v in row)))

    a, b = ce(logits[1], 1), ce(logits[3], 0)
    with T.default_dtype(np.float64):
        preds, _ = _preds(logits)
        got = patch_loss(preds, PatchPseudoLabels(labels, mask, 0.25)).item()
    assert got == pytest.approx((a + b) / 2, abs=1e-12)


def test_patch_loss_ignores_masked_predictions():
    logits = np.random.default_rng(5).normal(size=(6, 3))
    mask = np.array([1, 0, 1, 0, 1, 1], bool)
    pseudo = PatchPseudoLabels(np.array([0, 1, 2, 0, 1, 2]), mask, 0.25)
    base = patch_loss(_preds(logits)[0], pseudo).item()
    changed = logits.copy()
    changed[~mask] = 99.0
    assert patch_loss(_preds(changed)[0], pseudo).item() == base
    preds, lt = _preds(logits)
    patch_loss(preds, pseudo).backward()
    assert np.all(lt.grad[~mask] == 0)


def test_patch_loss_none_when_nothing_kept():
    preds, _ = _preds(np.zeros((4, 2)))
    assert patch_loss(preds, PatchPseudoLabels(np.zeros(4, int), np.zeros(4, bool), 0.25)) is None


def test_patch_loss_batch_skips_empty_images():
    logits = np.random.default_rng(6).normal(size=(2, 4, 2))
    labels = np.array([[0, 1, 0, 0], [1, 1, 0, 0]])
    mask = np.array([[False] * 4, [True, False, True, False]])
    both = patch_loss(_preds(logits)[0], PatchPseudoLabels(labels, mask, 0.25)).item()
    only = patch_loss(_preds(logits[1])[0], PatchPseudoLabels(labels[1], mask[1], 0.25)).item()
    assert both == pytest.approx(only, rel=1e-6)


def test_teacher_receives_no_gradient():
    pair = _pair()
    img = np.random.default_rng(7).random((2, 16, 16, 3))
    teacher_preds = pair.teacher_predict(img)
    assert not teacher_preds.probs.requires_grad
    _, sp = pair.student(img)
    pseudo = PatchPseudoLabels(np.zeros((2, 4), int), np.ones((2, 4), bool), 0.25)
    patch_loss(sp, pseudo).backward()
    assert all(p.grad is None for p in pair.teacher.parameters())
    assert all(p.grad is not None for p in pair.student.parameters())


def test_strong_augment_deterministic_and_clamped():
    img = np.random.default_rng(8).random((32, 32, 3))
    a, b = strong_augment(img, 123), strong_augment(img, 123)
    np.testing.assert_array_equal(a, b)
    for seed in range(50):
        out = strong_augment(img, seed)
        assert out.shape == img.shape and out.min() >= 0.0 and out.max() <= 1.0


def test_erase_rectangle_replayed_from_seed():
    seed, h, w = 2024, 32, 32
    rng = np.random.default_rng(seed)
    rng.random(), rng.random(), rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3)
    area = rng.uniform(0.02, 0.25) * h * w
    aspect = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    eh, ew = round(np.sqrt(area * aspect)), round(np.sqrt(area / aspect))
    while eh * ew > 0.25 * h * w:
        eh, ew = (eh - 1, ew) if eh >= ew else (eh, ew - 1)
    top, left = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
    assert augment_plan(seed, h, w).erase == (top, left, eh, ew)
    out = strong_augment(np.random.default_rng(9).random((h, w, 3)), seed)
    assert np.all(out[top:top + eh, left:left + ew] == 0.5)
    assert eh * ew <= 0.25 * h * w


def test_flip_token_grid_follows_image_flip():
    img = np.zeros((16, 16, 3))
    img[0:4, 0:4] = 1.0  # token 0 of a 4x4 grid
    for seed in range(8):
        plan = augment_plan(seed, 16, 16)
        flipped = img[:, ::-1] if plan.hflip else img
        flipped = flipped[::-1] if plan.vflip else flipped
        marker = np.zeros(16)
        marker[0] = 1
        moved = flip_token_grid(marker, plan, 4).reshape(4, 4)
        r, c = np.argwhere(moved)[0]
        assert flipped[r * 4, c * 4, 0] == 1.0
