"""Synthetic pavement images with one controllable distress per image.

Layout on disk::

    <root>/<split>/<class>/<index>.png
    <root>/<split>/manifest.tsv     path TAB class_index TAB area_ratio TAB seed

Images are regenerated bit-exactly from (class, area_ratio, seed), so the
ground-truth pixel masks are not stored.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, zoom

from .errors import DataError

CLASS_NAMES = ("normal", "crack", "patch-repair", "pothole")
AREA_RANGE = (0.01, 0.15)
AREA_TOLERANCE = 0.30
MAX_RETRIES = 10


@dataclass(frozen=True)
class DistressSpec:
    category: str
    area_ratio: float = 0.0
    texture_seed: int = 0

    def __post_init__(self):
        if self.category not in CLASS_NAMES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.category == "normal" and self.area_ratio != 0:
            raise ValueError("normal images have area_ratio 0")
        if self.category != "normal" and not 0.0 < self.area_ratio < 1.0:
            raise ValueError(f"distressed area_ratio must lie in (0, 1), got {self.area_ratio}")


# -- rendering ---------------------------------------------------------------

def _base_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    fine = gaussian_filter(rng.normal(0.0, 1.0, (size, size)), 0.7)
    coarse = zoom(rng.normal(0.0, 1.0, (size // 8 + 1, size // 8 + 1)), 8, order=1)[:size, :size]
    gray = 0.55 + 0.06 * fine / fine.std() + 0.03 * coarse
    # uneven illumination: a tilted plane plus a soft vignette
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    angle = rng.uniform(0, 2 * np.pi)
    gray += rng.uniform(0.03, 0.10) * (np.cos(angle) * xx + np.sin(angle) * yy)
    gray -= rng.uniform(0.0, 0.08) * (xx**2 + yy**2)
    tint = 1.0 + rng.uniform(-0.03, 0.03, size=3)
    return np.clip(gray[..., None] * tint, 0.0, 1.0)


def _disk(size: int, r: float) -> np.ndarray:
    k = int(np.ceil(r))
    yy, xx = np.mgrid[-k:k + 1, -k:k + 1]
    return (xx**2 + yy**2) <= r * r


def _stamp(mask: np.ndarray, cy: int, cx: int, brush: np.ndarray) -> None:
    k = brush.shape[0] // 2
    size = mask.shape[0]
    y0, y1 = max(0, cy - k), min(size, cy + k + 1)
    x0, x1 = max(0, cx - k), min(size, cx + k + 1)
    mask[y0:y1, x0:x1] |= brush[y0 - cy + k:y1 - cy + k, x0 - cx + k:x1 - cx + k]


def _crack_mask(rng, size: int, target: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    width = 0.5 if target < 0.03 * size * size else rng.choice([0.5, 1.0])
    brush = _disk(size, width)
    y, x = rng.uniform(0.2, 0.8, size=2) * size
    heading = rng.uniform(0, 2 * np.pi)
    steps = 0
    while mask.sum() < target and steps < 20 * size * size:
        heading += rng.normal(0.0, 0.35)
        y, x = y + np.sin(heading), x + np.cos(heading)
        if not (0 <= y < size and 0 <= x < size):
            # reflect back inside and turn around
            y, x = np.clip(y, 0, size - 1), np.clip(x, 0, size - 1)
            heading += np.pi + rng.normal(0.0, 0.5)
        if rng.random() < 0.01:  # branch
            y, x = np.argwhere(mask)[rng.integers(mask.sum())] if mask.any() else (y, x)
            heading = rng.uniform(0, 2 * np.pi)
        _stamp(mask, int(y), int(x), brush)
        steps += 1
    return mask


def _rect_mask(rng, size: int, target: int) -> np.ndarray:
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    h = int(np.clip(round(np.sqrt(target * aspect)), 2, size))
    w = int(np.clip(round(target / h), 2, size))
    top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    mask = np.zeros((size, size), dtype=bool)
    mask[top:top + h, left:left + w] = True
    return mask


def _ellipse_mask(rng, size: int, target: int) -> np.ndarray:
    aspect = np.exp(rng.uniform(np.log(0.6), np.log(1.6)))
    a = np.sqrt(target * aspect / np.pi)
    b = target / (np.pi * a)
    cy = rng.uniform(min(b, size / 2), max(size - b, size / 2))
    cx = rng.uniform(min(a, size / 2), max(size - a, size / 2))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0


def _paint(img, mask, rng, category):
    img = img.copy()
    if category == "crack":
        img[mask] = rng.uniform(0.08, 0.2) + rng.normal(0, 0.02, size=(mask.sum(), 1))
    elif category == "patch-repair":
        level = rng.uniform(0.25, 0.35)
        img[mask] = level + rng.normal(0, 0.01, size=(mask.sum(), 1))
        edge = mask & ~_erode(mask)
        img[edge] = rng.uniform(0.75, 0.85)
    elif category == "pothole":
        depth = gaussian_filter(mask.astype(np.float64), 1.0)
        texture = rng.normal(0, 0.05, size=mask.shape)
        dark = 0.12 + texture
        img = np.where(mask[..., None], np.clip(dark, 0, 1)[..., None] * np.ones(3), img)
        rim = (depth > 0.05) & ~mask
        img[rim] *= 0.7
    return np.clip(img, 0.0, 1.0)


def _erode(mask):
    m = mask.copy()
    m[1:] &= mask[:-1]
    m[:-1] &= mask[1:]
    m[:, 1:] &= mask[:, :-1]
    m[:, :-1] &= mask[:, 1:]
    return m


_SHAPES = {"crack": _crack_mask, "patch-repair": _rect_mask, "pothole": _ellipse_mask}


def generate_image(spec: DistressSpec, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(image [size, size, 3] float32 in [0, 1], pixel_mask bool)``."""
    rng = np.random.default_rng(spec.texture_seed)
    img = _base_texture(rng, size)
    if spec.category == "normal":
        return img.astype(np.float32), np.zeros((size, size), dtype=bool)
    target = spec.area_ratio * size * size
    for _ in range(MAX_RETRIES):
        mask = _SHAPES[spec.category](rng, size, max(1, round(target)))
        if abs(mask.sum() - target) <= AREA_TOLERANCE * target:
            return _paint(img, mask, rng, spec.category).astype(np.float32), mask
    raise DataError(f"could not reach area_ratio {spec.area_ratio} for {spec.category} in {MAX_RETRIES} tries")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    arr = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# -- datasets ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    class_index: int
    area_ratio: float
    seed: int


@dataclass
class DatasetManifest:
    split: str
    entries: list
    class_names: tuple = CLASS_NAMES
    root: Path | None = field(default=None, compare=False)

    def to_text(self) -> str:
        lines = [f"# split: {self.split}", "# classes: " + ",".join(self.class_names)]
        lines += [f"{e.path}\t{e.class_index}\t{e.area_ratio:.6f}\t{e.seed}" for e in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root=None) -> "DatasetManifest":
        split, names, entries = None, None, []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("# split:"):
                split = line.split(":", 1)[1].strip()
            elif line.startswith("# classes:"):
                names = tuple(line.split(":", 1)[1].strip().split(","))
            elif line.startswith("#"):
                continue
            else:
                parts = line.split("\t")
                if len(parts) != 4:
                    raise DataError(f"manifest line {n}: expected 4 tab-separated fields")
                entries.append(ManifestEntry(parts[0], int(parts[1]), float(parts[2]), int(parts[3])))
        if split is None or names is None:
            raise DataError("manifest is missing its split or classes header")
        for e in entries:
            if not 0 <= e.class_index < len(names):
                raise DataError(f"class index {e.class_index} out of range in manifest")
        return cls(split, entries, names, Path(root) if root is not None else None)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        return cls.from_text(path.read_text(), root=path.parent.parent)

    def spec(self, i: int) -> DistressSpec:
        e = self.entries[i]
        return DistressSpec(self.class_names[e.class_index], e.area_ratio, e.seed)

    def load_images(self) -> np.ndarray:
        if self.root is None:
            raise DataError("manifest has no root directory")
        return np.stack([load_png(self.root / e.path) for e in self.entries]) if self.entries else np.zeros((0,))

    def labels(self) -> np.ndarray:
        return np.array([e.class_index for e in self.entries], dtype=np.int64)


@dataclass(frozen=True)
class DataConfig:
    """Images per class for each split; classes with count 0 are left out."""

    train_counts: tuple = (500, 167, 167, 166)
    test_counts: tuple = (250, 84, 83, 83)
    image_size: int = 64
    area_min: float = AREA_RANGE[0]
    area_max: float = AREA_RANGE[1]
    seed: int = 0
    class_names: tuple = CLASS_NAMES


_SPLIT_SALT = {"train": 0x7472, "test": 0x7465}


def _entry_seed(seed: int, split: str, cls: int, i: int) -> int:
    ss = np.random.SeedSequence([seed, _SPLIT_SALT[split], cls, i])
    return int(ss.generate_state(1, np.uint32)[0])


def make_split(cfg: DataConfig, split: str, out_dir) -> DatasetManifest:
    counts = cfg.train_counts if split == "train" else cfg.test_counts
    out = Path(out_dir)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SPLIT_SALT[split]]))
    entries = []
    try:
        (out / split).mkdir(parents=True, exist_ok=True)
        for cls, n in enumerate(counts):
            name = cfg.class_names[cls]
            if n:
                (out / split / name).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                seed = _entry_seed(cfg.seed, split, cls, i)
                ratio = 0.0 if cls == 0 else round(float(rng.uniform(cfg.area_min, cfg.area_max)), 6)
                img, _ = generate_image(DistressSpec(name, ratio, seed), cfg.image_size)
                rel = f"{split}/{name}/{i:05d}.png"
                save_png(out / rel, img)
                entries.append(ManifestEntry(rel, cls, ratio, seed))
        manifest = DatasetManifest(split, entries, tuple(cfg.class_names), out)
        (out / split / "manifest.tsv").write_text(manifest.to_text())
    except OSError as exc:
        raise DataError(f"cannot write dataset under {out}: {exc}") from exc
    return manifest


def make_dataset(cfg: DataConfig, out_dir) -> dict:
    """Write both splits; returns ``{"train": manifest, "test": manifest}``."""
    if len(cfg.train_counts) > len(cfg.class_names) or len(cfg.test_counts) > len(cfg.class_names):
        raise ValueError("more counts than classes")
    os.makedirs(out_dir, exist_ok=True)
    return {split: make_split(cfg, split, out_dir) for split in ("train", "test")}


def ground_truth_mask(manifest: DatasetManifest, i: int, size: int) -> np.ndarray:
    return generate_image(manifest.spec(i), size)[1]
