"""k-fold augmentation: compose k distinct operations drawn from a fixed pool.

Every image gets its own generator seeded by ``(seed, epoch, index)``, so the
result for an image does not depend on batch composition, ordering, or how
many workers share the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

POOL = ("color_jitter", "crop", "cutout", "flip", "scale", "rotate")


@dataclass(frozen=True)
class AugmentConfig:
    k: int | str = "auto"
    pool: tuple[str, ...] = POOL
    jitter: tuple[float, float] = (0.8, 1.2)
    crop_pad: int = 4
    cutout_size: int = 8  # at 32x32; scaled with image size
    rotate_deg: float = 15.0
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(self.pool))
        object.__setattr__(self, "jitter", tuple(self.jitter))
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        unknown = set(self.pool) - set(POOL)
        if unknown:
            raise ConfigError(f"unknown augmentation ops {sorted(unknown)}; pool is {POOL}")
        if len(set(self.pool)) != len(self.pool):
            raise ConfigError(f"augmentation pool entries must be distinct, got {self.pool}")
        if self.k != "auto":
            if not isinstance(self.k, int) or self.k < 0:
                raise ConfigError(f"k must be a non-negative integer or 'auto', got {self.k!r}")
            if self.k > len(self.pool):
                raise ConfigError(f"k={self.k} exceeds pool size {len(self.pool)}")

    def resolve(self, ipc: int | None) -> "AugmentConfig":
        if self.k != "auto":
            return self
        return AugmentConfig(**{**self.__dict__, "k": min(k_for_ipc(ipc), len(self.pool))})


def k_for_ipc(ipc: int | None) -> int:
    """4-fold augmentation for one image per class, 2-fold otherwise."""
    return 4 if ipc == 1 else 2


def _gray(img):
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def color_jitter(img, rng, cfg: AugmentConfig):
    lo, hi = cfg.jitter
    b, c, s = rng.uniform(lo, hi, size=3)
    img = img * b
    gray = _gray(img)
    img = gray.mean() + (img - gray.mean()) * c
    gray = _gray(img)
    return gray + (img - gray) * s


def crop(img, rng, cfg: AugmentConfig):
    pad = cfg.crop_pad
    if pad <= 0:
        return img
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    return padded[:, dy:dy + h, dx:dx + w]


def cutout(img, rng, cfg: AugmentConfig):
    _, h, w = img.shape
    ch = max(1, round(cfg.cutout_size * h / 32))
    cw = max(1, round(cfg.cutout_size * w / 32))
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    y0, y1 = max(0, cy - ch // 2), min(h, cy - ch // 2 + ch)
    x0, x1 = max(0, cx - cw // 2), min(w, cx - cw // 2 + cw)
    out = img.copy()
    out[:, y0:y1, x0:x1] = 0.0
    return out


def flip(img, rng, cfg: AugmentConfig):
    return img[:, :, ::-1]


def _affine_about_center(img, matrix):
    _, h, w = img.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return np.stack([
        ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest")
        for ch in img
    ])


def scale(img, rng, cfg: AugmentConfig):
    factor = rng.uniform(*cfg.scale_range)
    # output pixel o samples input at M @ o + offset, so zooming in by f uses M = I / f
    return _affine_about_center(img, np.eye(2) / factor)


def rotate(img, rng, cfg: AugmentConfig):
    theta = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    c, s = np.cos(theta), np.sin(theta)
    return _affine_about_center(img, np.array([[c, -s], [s, c]]))


OPS = {
    "color_jitter": color_jitter,
    "crop": crop,
    "cutout": cutout,
    "flip": flip,
    "scale": scale,
    "rotate": rotate,
}


def image_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch), int(index)])


def sample_ops(cfg: AugmentConfig, rng: np.random.Generator) -> list[str]:
    if cfg.k == "auto":
        raise ConfigError("resolve k='auto' against the dataset IPC before augmenting")
    if cfg.k == 0:
        return []
    picks = rng.choice(len(cfg.pool), size=cfg.k, replace=False)
    return [cfg.pool[i] for i in picks]


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    ops = sample_ops(cfg, rng)
    if not ops:
        return img.copy()
    out = img.astype(np.float32)
    for name in ops:
        out = OPS[name](out, rng, cfg)
    return np.clip(out, 0.0, 1.0).astype(img.dtype, copy=False)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, seed: int, epoch: int, base_index: int = 0) -> np.ndarray:
    """Augment a ``(batch, C, H, W)`` array of images in ``[0, 1]``.

    Image ``j`` of the batch uses the generator for ``(seed, epoch, base_index + j)``.
    Labels are never involved.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ConfigError(f"expected (batch, C, H, W) images, got shape {images.shape}")
    if cfg.k == 0:
        return images.copy()
    out = np.empty_like(images)
    for j, img in enumerate(images):
        out[j] = augment_image(img, cfg, image_rng(seed, epoch, base_index + j))
    return out
