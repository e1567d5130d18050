"""Swin-lite backbone: patch embedding, windowed attention stages, patch merging.

The output is a :class:`TokenGrid` of ``m = g*g`` tokens with dimension
``L = embed_dim * 2**(num_stages-1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, ModuleList, Parameter, trunc_normal
from .tensor import Tensor

MASK_VALUE = -100.0


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 48
    depths: tuple = (2, 2, 2)
    heads: tuple = (2, 4, 8)
    window: int = 4
    num_stages: int = 3
    mlp_ratio: int = 4
    rel_pos_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if len(self.depths) != self.num_stages or len(self.heads) != self.num_stages:
            raise ConfigError(
                f"depths {self.depths} and heads {self.heads} need {self.num_stages} entries"
            )
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        g = self.image_size // self.patch_size
        for s in range(self.num_stages):
            if s and g % 2:
                raise ConfigError(f"stage {s} cannot merge an odd grid of side {g}")
            if s:
                g //= 2
            dim = self.embed_dim * 2**s
            if dim % self.heads[s]:
                raise ConfigError(f"stage {s}: dim {dim} not divisible by {self.heads[s]} heads")
            if g % min(self.window, g):
                raise ConfigError(f"stage {s}: grid side {g} not divisible by window {self.window}")

    def stage_grid(self, s: int) -> int:
        return self.image_size // (self.patch_size * 2**s)

    @property
    def grid_side(self) -> int:
        return self.stage_grid(self.num_stages - 1)

    @property
    def num_tokens(self) -> int:
        return self.grid_side**2

    @property
    def token_dim(self) -> int:
        return self.embed_dim * 2 ** (self.num_stages - 1)

    @property
    def receptive_patch_pixels(self) -> int:
        return self.image_size // self.grid_side


@dataclass
class TokenGrid:
    """Final-stage tokens, ``[m, L]`` for one image or ``[B, m, L]`` for a batch."""

    tokens: Tensor
    grid_side: int
    receptive_patch_pixels: int = field(default=0)

    @property
    def m(self) -> int:
        return self.grid_side**2

    @property
    def batched(self) -> bool:
        return self.tokens.ndim == 3


# -- window helpers ----------------------------------------------------------

def window_partition(x: Tensor, grid: int, window: int) -> Tensor:
    """[B, g, g, C] -> [B * nW, w*w, C], windows in row-major order."""
    b, c = x.shape[0], x.shape[-1]
    n = grid // window
    x = x.reshape(b, n, window, n, window, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * n * n, window * window, c)


def window_merge(x: Tensor, grid: int, window: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    c = x.shape[-1]
    n = grid // window
    b = x.shape[0] // (n * n)
    x = x.reshape(b, n, n, window, window, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid, grid, c)


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll a [B, g, g, C] grid up-left by ``shift`` (negative rolls back)."""
    return T.roll(x, (-shift, -shift), (1, 2))


def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = (coords[:, :, None] - coords[:, None, :]).transpose(1, 2, 0) + (window - 1)
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def shifted_window_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """Additive [nW, N, N] mask separating regions that were wrapped by the roll."""
    region = np.zeros((grid, grid), dtype=np.int64)
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for ws in bounds:
            region[hs, ws] = label
            label += 1
    n = grid // window
    win = region.reshape(n, window, n, window).transpose(0, 2, 1, 3).reshape(n * n, window * window)
    diff = win[:, None, :] != win[:, :, None]
    return np.where(diff, MASK_VALUE, 0.0)


# -- layers ------------------------------------------------------------------

class WindowAttention(Module):
    def __init__(self, dim: int, heads: int, window: int, rng, rel_pos_bias: bool = True):
        super().__init__()
        self.dim, self.heads, self.window = dim, heads, window
        self.scale = (dim // heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.use_bias = rel_pos_bias
        if rel_pos_bias:
            self.bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)))
            self.bias_index = relative_position_index(window)
        self.last_attn: np.ndarray | None = None

    def forward(self, xw: Tensor, mask: np.ndarray | None = None) -> Tensor:
        bw, n, c = xw.shape
        h, d = self.heads, c // self.heads
        qkv = self.qkv(xw).reshape(bw, n, 3, h, d).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = q @ k.transpose(0, 1, 3, 2)
        if self.use_bias:
            bias = T.take(self.bias_table, self.bias_index).transpose(2, 0, 1)
            attn = attn + bias
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.reshape(bw // nw, nw, h, n, n) + Tensor(mask[None, :, None], dtype=attn.dtype)
            attn = attn.reshape(bw, h, n, n)
        attn = T.softmax_rows(attn)
        self.last_attn = attn.data
        out = (attn @ v).transpose(0, 2, 1, 3).reshape(bw, n, c)
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SwinBlock(Module):
    def __init__(self, dim: int, grid: int, heads: int, window: int, shifted: bool, rng,
                 mlp_ratio: int = 4, rel_pos_bias: bool = True):
        super().__init__()
        if grid <= window:
            window, shifted = grid, False
        if grid % window:
            raise ConfigError(f"grid side {grid} not divisible by window {window}")
        self.dim, self.grid, self.window = dim, grid, window
        self.shift = window // 2 if shifted else 0
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)
        self.mask = shifted_window_mask(grid, window, self.shift) if self.shift else None

    def attend(self, x: Tensor) -> Tensor:
        """Windowed attention on [B, g*g, C]; the residual branch before adding."""
        b, g, w = x.shape[0], self.grid, self.window
        h = self.norm1(x).reshape(b, g, g, self.dim)
        if self.shift:
            h = cyclic_shift(h, self.shift)
        a = self.attn(window_partition(h, g, w), self.mask)
        a = window_merge(a, g, w)
        if self.shift:
            a = cyclic_shift(a, -self.shift)
        return a.reshape(b, g * g, self.dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attend(x)
        return x + self.mlp(self.norm2(x))


class PatchMerging(Module):
    """2x2 neighbourhood concat, then LayerNorm and a linear map to 2*dim."""

    def __init__(self, dim: int, grid: int, rng):
        super().__init__()
        self.dim, self.grid = dim, grid
        self.norm = LayerNorm(4 * dim)
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        b, g, c = x.shape[0], self.grid, self.dim
        # (row offset, col offset) order (0,0),(1,0),(0,1),(1,1)
        x = x.reshape(b, g // 2, 2, g // 2, 2, c).transpose(0, 1, 3, 4, 2, 5)
        x = x.reshape(b, (g // 2) ** 2, 4 * c)
        return self.reduction(self.norm(x))


class PatchEmbed(Module):
    def __init__(self, patch_size: int, dim: int, rng):
        super().__init__()
        self.patch_size = patch_size
        self.proj = Linear(patch_size * patch_size * 3, dim, rng)
        self.norm = LayerNorm(dim)

    def forward(self, images: np.ndarray) -> Tensor:
        return self.norm(self.proj(Tensor(patchify(images, self.patch_size))))


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """[B, H, W, 3] -> [B, (H/p)*(W/p), p*p*3], patches row-major."""
    images = np.asarray(images)
    b, hgt, wid, ch = images.shape
    x = images.reshape(b, hgt // p, p, wid // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (hgt // p) * (wid // p), p * p * ch)


class Stage(Module):
    def __init__(self, cfg: BackboneConfig, s: int, rng):
        super().__init__()
        dim, grid = cfg.embed_dim * 2**s, cfg.stage_grid(s)
        self.merge = PatchMerging(dim // 2, grid * 2, rng) if s else None
        self.blocks = ModuleList(
            SwinBlock(dim, grid, cfg.heads[s], cfg.window, bool(i % 2), rng,
                      cfg.mlp_ratio, cfg.rel_pos_bias)
            for i in range(cfg.depths[s])
        )

    def forward(self, x: Tensor) -> Tensor:
        if self.merge is not None:
            x = self.merge(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim, rng)
        self.stages = ModuleList(Stage(cfg, s, rng) for s in range(cfg.num_stages))
        self.norm = LayerNorm(cfg.token_dim)

    def forward(self, images) -> TokenGrid:
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        single = images.ndim == 3
        if single:
            images = images[None]
        size = self.cfg.image_size
        if images.shape[1:] != (size, size, 3):
            raise ConfigError(f"expected images of shape ({size}, {size}, 3), got {images.shape[1:]}")
        x = self.patch_embed(images)
        for stage in self.stages:
            x = stage(x)
        x = self.norm(x)
        if single:
            x = x.reshape(self.cfg.num_tokens, self.cfg.token_dim)
        return TokenGrid(x, self.cfg.grid_side, self.cfg.receptive_patch_pixels)
