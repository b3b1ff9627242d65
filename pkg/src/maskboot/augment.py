"""Paired view augmentation: identical geometry for image and masks.

Geometric order is crop -> resize -> horizontal flip; photometric ops
(brightness, contrast, saturation, grayscale, blur) touch only the image.
Masks are resampled by nearest neighbor with half-pixel centers and ties
broken toward the top-left source pixel, so view masks stay pixel-aligned
with their views under one fixed, documented rule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .config import AugmentConfig
from .errors import ConfigError, ContractError
from .masks import MaskSet

_GRAY = np.array([0.299, 0.587, 0.114], dtype=np.float64)
_BLUR_RADIUS = 3


@dataclass(frozen=True)
class Transform:
    """One sampled augmentation; geometry applies to image and masks alike."""

    crop: tuple[float, float, float, float]  # y0, x0, h, w in unit coords
    flip: bool
    brightness: float
    contrast: float
    saturation: float
    grayscale: bool
    blur_sigma: float  # 0 disables
    out_size: int

    def __post_init__(self):
        y0, x0, h, w = self.crop
        if not (0.0 <= y0 and 0.0 <= x0 and h > 0 and w > 0 and y0 + h <= 1.0 + 1e-9 and x0 + w <= 1.0 + 1e-9):
            raise ContractError(f"crop rectangle {self.crop} escapes the unit square")

    @property
    def is_geometric_identity(self) -> bool:
        return self.crop == (0.0, 0.0, 1.0, 1.0) and not self.flip


@dataclass(frozen=True)
class PipelineSpec:
    """Parameter ranges for one augmentation pipeline (T or T')."""

    cfg: AugmentConfig
    blur_p: float
    out_size: int


def pipeline_specs(cfg: AugmentConfig, image_size: int) -> tuple[PipelineSpec, PipelineSpec]:
    """The asymmetric (T, T') pair; they differ only in blur probability."""
    out = cfg.out_size if cfg.out_size is not None else image_size
    return (
        PipelineSpec(cfg=cfg, blur_p=cfg.blur_p_first, out_size=out),
        PipelineSpec(cfg=cfg, blur_p=cfg.blur_p_second, out_size=out),
    )


def sample_transform(rng: np.random.Generator, spec: PipelineSpec) -> Transform:
    """Draw one Transform; all parameters land inside the spec's ranges."""
    cfg = spec.cfg
    if cfg.crop_scale_min > cfg.crop_scale_max:
        raise ConfigError("augment.crop_scale_min exceeds augment.crop_scale_max")
    crop = (0.0, 0.0, 1.0, 1.0)
    for _ in range(10):
        s = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
        log_r = rng.uniform(np.log(cfg.crop_ratio_min), np.log(cfg.crop_ratio_max))
        r = float(np.exp(log_r))
        w = float(np.sqrt(s * r))
        h = float(np.sqrt(s / r))
        if w <= 1.0 and h <= 1.0:
            y0 = float(rng.uniform(0.0, 1.0 - h))
            x0 = float(rng.uniform(0.0, 1.0 - w))
            crop = (y0, x0, h, w)
            break
    flip = bool(rng.random() < cfg.flip_p)
    brightness = contrast = saturation = 1.0
    if rng.random() < cfg.jitter_p:
        brightness = float(rng.uniform(max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness))
        contrast = float(rng.uniform(max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast))
        saturation = float(rng.uniform(max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation))
    grayscale = bool(rng.random() < cfg.grayscale_p)
    blur_sigma = 0.0
    if rng.random() < spec.blur_p:
        blur_sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
    return Transform(
        crop=crop,
        flip=flip,
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        grayscale=grayscale,
        blur_sigma=blur_sigma,
        out_size=spec.out_size,
    )


def sample_transform_pair(
    rng: np.random.Generator,
    cfg: AugmentConfig,
    image_size: int,
    share_geometry: bool = False,
) -> tuple[Transform, Transform]:
    """Sample (t, t'). With share_geometry, t' reuses t's crop and flip."""
    spec_a, spec_b = pipeline_specs(cfg, image_size)
    t = sample_transform(rng, spec_a)
    t_prime = sample_transform(rng, spec_b)
    if share_geometry:
        t_prime = dataclasses.replace(t_prime, crop=t.crop, flip=t.flip)
    return t, t_prime


def _source_coords(crop_lo: float, crop_len: float, src_size: int, out_size: int) -> np.ndarray:
    """Continuous source coordinates of the output pixel centers."""
    scale = crop_len * src_size / out_size
    return crop_lo * src_size + (np.arange(out_size) + 0.5) * scale - 0.5


def nn_indices(crop_lo: float, crop_len: float, src_size: int, out_size: int) -> np.ndarray:
    """Nearest source index per output pixel; halves round toward top-left."""
    src = _source_coords(crop_lo, crop_len, src_size, out_size)
    return np.clip(np.ceil(src - 0.5).astype(np.int64), 0, src_size - 1)


def _bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = image[np.ix_(y0, x0)]
    b = image[np.ix_(y0, x1)]
    c = image[np.ix_(y1, x0)]
    d = image[np.ix_(y1, x1)]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return top * (1 - wy) + bot * wy


def _gaussian_kernel(sigma: float) -> np.ndarray:
    xs = np.arange(-_BLUR_RADIUS, _BLUR_RADIUS + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _blur(image: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    pad = _BLUR_RADIUS
    out = np.pad(image, ((pad, pad), (0, 0), (0, 0)), mode="reflect")
    out = sum(out[i : i + image.shape[0]] * k[i] for i in range(len(k)))
    out = np.pad(out, ((0, 0), (pad, pad), (0, 0)), mode="reflect")
    out = sum(out[:, i : i + image.shape[1]] * k[i] for i in range(len(k)))
    return out


def _photometric(image: np.ndarray, tf: Transform) -> np.ndarray:
    out = image.astype(np.float64)
    if tf.brightness != 1.0:
        out = np.clip(out * tf.brightness, 0.0, 1.0)
    if tf.contrast != 1.0:
        mean = float((out @ _GRAY).mean())
        out = np.clip((out - mean) * tf.contrast + mean, 0.0, 1.0)
    if tf.saturation != 1.0:
        gray = (out @ _GRAY)[..., None]
        out = np.clip(gray + (out - gray) * tf.saturation, 0.0, 1.0)
    if tf.grayscale:
        out = np.repeat((out @ _GRAY)[..., None], 3, axis=2)
    if tf.blur_sigma > 0.0:
        out = np.clip(_blur(out, tf.blur_sigma), 0.0, 1.0)
    return out


def apply(tf: Transform, scene_image: np.ndarray, mask_set: MaskSet) -> tuple[np.ndarray, MaskSet]:
    """Produce one view and its aligned mask set."""
    if scene_image.ndim != 3 or scene_image.shape[2] != 3:
        raise ContractError(f"scene image must be H x W x 3, got {scene_image.shape}")
    if scene_image.shape[:2] != mask_set.shape:
        raise ContractError(
            f"image {scene_image.shape[:2]} and mask grid {mask_set.shape} disagree"
        )
    h_src, w_src = mask_set.shape
    y0, x0, ch, cw = tf.crop
    out = tf.out_size

    if tf.is_geometric_identity and out == h_src == w_src:
        view = scene_image.astype(np.float64)
        labels = mask_set.grid.copy()
    else:
        ys = _source_coords(y0, ch, h_src, out)
        xs = _source_coords(x0, cw, w_src, out)
        view = _bilinear(scene_image.astype(np.float64), ys, xs)
        iy = nn_indices(y0, ch, h_src, out)
        ix = nn_indices(x0, cw, w_src, out)
        labels = mask_set.grid[np.ix_(iy, ix)]
        if tf.flip:
            view = view[:, ::-1]
            labels = labels[:, ::-1]

    view = _photometric(view, tf)
    return view.astype(np.float32), MaskSet(np.ascontiguousarray(labels))


@dataclass(frozen=True)
class ViewPair:
    """Two augmented views of one scene plus their aligned mask sets."""

    v: np.ndarray
    v_prime: np.ndarray
    m_set: MaskSet
    m_prime_set: MaskSet


def make_view_pair(
    scene_image: np.ndarray,
    mask_set: MaskSet,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    share_geometry: bool = False,
) -> ViewPair:
    t, t_prime = sample_transform_pair(rng, cfg, mask_set.shape[0], share_geometry)
    v, m = apply(t, scene_image, mask_set)
    v_p, m_p = apply(t_prime, scene_image, mask_set)
    return ViewPair(v=v, v_prime=v_p, m_set=m, m_prime_set=m_p)
