import numpy as np
import pytest

from gradcheck import module_check
from pict import tensor as T
from pict.backbone import (
    Backbone,
    BackboneConfig,
    PatchEmbed,
    SwinBlock,
    cyclic_shift,
    patchify,
    window_merge,
    window_partition,
)
from pict.errors import ConfigError
from pict.tensor import Tensor

SMALL = BackboneConfig(image_size=32, patch_size=4, embed_dim=8, depths=(2, 2), heads=(2, 2),
                       window=4, num_stages=2)


def test_default_config_shapes():
    cfg = BackboneConfig()
    assert (cfg.grid_side, cfg.num_tokens, cfg.token_dim, cfg.receptive_patch_pixels) == (4, 16, 192, 16)


@pytest.mark.parametrize("kwargs", [
    dict(image_size=63),
    dict(image_size=48, patch_size=4, window=8),
    dict(depths=(2, 2)),
    dict(embed_dim=50, heads=(3, 4, 8)),
])
def test_bad_geometry_rejected_at_construction(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_forward_default_config_token_grid():
    bb = Backbone(BackboneConfig(), np.random.default_rng(0))
    img = np.random.default_rng(1).random((64, 64, 3))
    grid = bb(img)
    assert grid.tokens.shape == (16, 192) and grid.m == 16 and grid.grid_side == 4
    assert np.all(np.isfinite(grid.tokens.data))


def test_identical_images_identical_grids():
    bb = Backbone(SMALL, np.random.default_rng(0))
    img = np.random.default_rng(2).random((32, 32, 3))
    out = bb(np.stack([img, img])).tokens.data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(bb(img).tokens.data, out[0])


def test_zero_and_one_images_differ():
    bb = Backbone(BackboneConfig(), np.random.default_rng(0))
    a = bb(np.zeros((64, 64, 3))).tokens.data
    b = bb(np.ones((64, 64, 3))).tokens.data
    assert not np.allclose(a, b)


def _layer_norm(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + eps)


def test_patch_embed_zero_image_gives_normalised_bias():
    with T.default_dtype(np.float64):
        pe = PatchEmbed(4, 6, np.random.default_rng(0))
        pe.proj.bias.data[:] = np.arange(6.0)
        out = pe(np.zeros((1, 8, 8, 3))).data[0]
    np.testing.assert_allclose(out, np.tile(_layer_norm(np.arange(6.0)), (4, 1)), atol=1e-9)


def test_patch_embed_matches_direct_matrix_product():
    rng = np.random.default_rng(3)
    img = rng.random((8, 8, 3))
    with T.default_dtype(np.float64):
        pe = PatchEmbed(4, 5, rng)
        out = pe(img[None]).data[0]
    assert out.shape == (4, 5)
    w, b = pe.proj.weight.data, pe.proj.bias.data
    for r, (i, j) in enumerate([(0, 0), (0, 4), (4, 0), (4, 4)]):
        patch = img[i:i + 4, j:j + 4].reshape(-1)
        np.testing.assert_allclose(out[r], _layer_norm(patch @ w + b), atol=1e-9)


def test_patch_embed_permutation_locality():
    rng = np.random.default_rng(4)
    img = rng.random((8, 8, 3))
    swapped = img.copy()
    swapped[0:4, 0:4], swapped[4:8, 4:8] = img[4:8, 4:8], img[0:4, 0:4]
    pe = PatchEmbed(4, 5, rng)
    a, b = pe(img[None]).data[0], pe(swapped[None]).data[0]
    np.testing.assert_allclose(b[[3, 1, 2, 0]], a, atol=1e-6)


def test_patchify_row_major():
    img = np.arange(8 * 8 * 3, dtype=float).reshape(1, 8, 8, 3)
    p = patchify(img, 4)
    np.testing.assert_array_equal(p[0, 1], img[0, 0:4, 4:8].reshape(-1))


def _dense_mha(x, blk):
    """Oracle: plain multi-head attention over all tokens of one window."""
    attn = blk.attn
    h = _layer_norm(x) * blk.norm1.weight.data + blk.norm1.bias.data
    qkv = h @ attn.qkv.weight.data + attn.qkv.bias.data
    n, c = x.shape
    d = c // attn.heads
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    bias = attn.bias_table.data[attn.bias_index]  # [n, n, heads]
    outs = []
    for hd in range(attn.heads):
        s = slice(hd * d, (hd + 1) * d)
        logits = q[:, s] @ k[:, s].T * d**-0.5 + bias[:, :, hd]
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        outs.append(p @ v[:, s])
    return np.concatenate(outs, 1) @ attn.proj.weight.data + attn.proj.bias.data


def test_single_window_equals_dense_attention():
    rng = np.random.default_rng(5)
    with T.default_dtype(np.float64):
        blk = SwinBlock(8, 4, 2, 4, False, rng)
        for p in blk.parameters():
            p.data[...] = rng.normal(0, 0.3, p.shape)
        x = rng.normal(size=(16, 8))
        got = blk.attend(Tensor(x[None])).data[0]
    np.testing.assert_allclose(got, _dense_mha(x, blk), atol=1e-10)


def test_window_isolation_non_shifted():
    rng = np.random.default_rng(6)
    blk = SwinBlock(8, 8, 2, 4, False, rng)
    x = rng.normal(size=(1, 64, 8))
    base = blk.attend(Tensor(x)).data.reshape(8, 8, 8)
    # token 7 is (row 0, col 7): window 1 of the 2x2 window layout
    y = x.copy()
    y[0, 7] = 0.0
    out = blk.attend(Tensor(y)).data.reshape(8, 8, 8)
    changed = np.any(out != base, axis=-1)
    expected = np.zeros((8, 8), dtype=bool)
    expected[0:4, 4:8] = True
    np.testing.assert_array_equal(changed, expected)


def test_shifted_block_mask_blocks_wrapped_regions():
    rng = np.random.default_rng(7)
    blk = SwinBlock(8, 8, 2, 4, True, rng)
    blk.attend(Tensor(rng.normal(size=(1, 64, 8))))
    w = blk.attn.last_attn  # [nW, heads, 16, 16]
    masked = blk.mask < 0
    assert masked.any()
    assert np.all(w[:, :, :][np.broadcast_to(masked[:, None], w.shape)] < 1e-30)


def test_cyclic_shift_inverse_is_identity():
    x = Tensor(np.arange(2 * 8 * 8 * 3, dtype=float).reshape(2, 8, 8, 3))
    back = cyclic_shift(cyclic_shift(x, 2), -2)
    np.testing.assert_array_equal(back.data, x.data)
    assert not np.array_equal(cyclic_shift(x, 2).data, x.data)


def test_window_partition_roundtrip():
    x = Tensor(np.random.default_rng(8).normal(size=(2, 8, 8, 3)))
    w = window_partition(x, 8, 4)
    assert w.shape == (8, 16, 3)
    np.testing.assert_array_equal(w.data[1], x.data[0, 0:4, 4:8].reshape(16, 3))
    np.testing.assert_array_equal(window_merge(w, 8, 4).data, x.data)


def test_every_parameter_gets_finite_gradient():
    bb = Backbone(SMALL, np.random.default_rng(9))
    grid = bb(np.random.default_rng(10).random((2, 32, 32, 3)))
    (grid.tokens * grid.tokens).sum().backward()
    for name, p in bb.named_parameters():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    with T.default_dtype(np.float64):
        blk = SwinBlock(4, 4, 2, 2, True, rng)
    proj = Tensor(rng.normal(size=(1, 16, 4)), dtype=np.float64)
    err = module_check([blk], lambda x: (blk(x) * proj).sum(), [rng.normal(size=(1, 16, 4))])
    assert err < 1e-3


def test_merging_stage_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    cfg = BackboneConfig(image_size=16, patch_size=2, embed_dim=4, depths=(1, 1), heads=(1, 2),
                         window=4, num_stages=2)
    with T.default_dtype(np.float64):
        bb = Backbone(cfg, rng)
    img = rng.random((1, 16, 16, 3))
    proj = Tensor(rng.normal(size=(1, 16, 8)), dtype=np.float64)
    # small weights under LayerNorm give sharp curvature, so use a fine step
    assert module_check([bb], lambda: (bb(img).tokens * proj).sum(), h=1e-5) < 1e-3
