"""Geometry-tracked augmentation and box arithmetic.

All boxes are ``(x, y, w, h)`` with ``x`` rightward and ``y`` downward.
Three coordinate frames appear and every function states which one it
works in: source-image pixels, view pixels (after crop + flip + resize),
and feature-map cells (view pixels divided by a stride).

The geometric half of a view transform is an exact affine map, so boxes
can be moved between frames and back without error. The photometric half
(brightness, contrast, blur) never needs to be inverted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DegenerateRegionError, GeometryError

_MAX_CROP_TRIES = 10


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive sides."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise GeometryError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def right(self) -> float:
        return self.x + self.w

    @property
    def bottom(self) -> float:
        return self.y + self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    def contains(self, other: "Box", tol: float = 1e-6) -> bool:
        return (
            other.x >= self.x - tol
            and other.y >= self.y - tol
            and other.right <= self.right + tol
            and other.bottom <= self.bottom + tol
        )


@dataclass(frozen=True)
class Photometric:
    """Pixel-value part of a view transform. Applied after resizing."""

    brightness: float = 1.0
    contrast: float = 1.0
    blur_sigma: float = 0.0


@dataclass(frozen=True)
class ViewParams:
    """Full record of one sampled view transform.

    ``crop_rect`` is an integer ``(x, y, w, h)`` in source-image pixels;
    the crop is flipped horizontally when ``hflip`` is set, then resized
    to ``output_size`` x ``output_size``.
    """

    crop_rect: tuple[int, int, int, int]
    output_size: int
    hflip: bool
    photometric: Photometric


@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for random view sampling.

    ``scale_min``/``scale_max`` bound the crop area as a fraction of the
    source area; ``ratio_min``/``ratio_max`` bound the crop aspect ratio.
    ``jitter`` is the half-width of the brightness/contrast factor range
    around 1. A blur sigma is drawn from
    [``blur_sigma_min``, ``blur_sigma_max``] with probability ``blur_prob``.
    """

    output_size: int = 64
    scale_min: float = 0.2
    scale_max: float = 1.0
    ratio_min: float = 0.75
    ratio_max: float = 4.0 / 3.0
    hflip_prob: float = 0.5
    jitter: float = 0.4
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0

    def validate(self) -> None:
        if self.output_size < 1:
            raise ConfigError(f"output_size must be >= 1, got {self.output_size}")
        if not (0 < self.scale_min <= self.scale_max <= 1.0):
            raise ConfigError(
                f"need 0 < scale_min <= scale_max <= 1, got [{self.scale_min}, {self.scale_max}]"
            )
        if not (0 < self.ratio_min <= self.ratio_max):
            raise ConfigError(
                f"need 0 < ratio_min <= ratio_max, got [{self.ratio_min}, {self.ratio_max}]"
            )
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ConfigError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if not (0.0 <= self.blur_prob <= 1.0):
            raise ConfigError(f"blur_prob must be in [0, 1], got {self.blur_prob}")
        if not (0.0 <= self.jitter < 1.0):
            raise ConfigError(f"jitter must be in [0, 1), got {self.jitter}")
        if not (0 < self.blur_sigma_min <= self.blur_sigma_max):
            raise ConfigError(
                f"need 0 < blur_sigma_min <= blur_sigma_max, got "
                f"[{self.blur_sigma_min}, {self.blur_sigma_max}]"
            )


def sample_view_params(
    rng: np.random.Generator, cfg: AugmentConfig, src_size: tuple[int, int]
) -> ViewParams:
    """Draw one view transform for a source image of ``(H, W)`` pixels.

    The crop is a random area/aspect rectangle: up to ten proposals are
    tried and the first one that fits the image is kept; if none fits,
    the largest centered crop satisfying the aspect bounds is used. The
    result is a pure function of the generator state, so re-seeding
    reproduces the same parameters.
    """
    cfg.validate()
    h, w = src_size
    if h < 1 or w < 1:
        raise GeometryError(f"source size must be positive, got {src_size}")
    area = float(h * w)
    log_ratio = (math.log(cfg.ratio_min), math.log(cfg.ratio_max))

    crop: tuple[int, int, int, int] | None = None
    for _ in range(_MAX_CROP_TRIES):
        target_area = area * rng.uniform(cfg.scale_min, cfg.scale_max)
        ratio = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target_area * ratio)))
        ch = int(round(math.sqrt(target_area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            cx = int(rng.integers(0, w - cw + 1))
            cy = int(rng.integers(0, h - ch + 1))
            crop = (cx, cy, cw, ch)
            break
    if crop is None:
        # Largest centered crop whose aspect ratio is inside the bounds.
        in_ratio = w / h
        if in_ratio < cfg.ratio_min:
            cw, ch = w, min(h, int(round(w / cfg.ratio_min)))
        elif in_ratio > cfg.ratio_max:
            cw, ch = min(w, int(round(h * cfg.ratio_max))), h
        else:
            cw, ch = w, h
        cw, ch = max(cw, 1), max(ch, 1)
        crop = ((w - cw) // 2, (h - ch) // 2, cw, ch)

    hflip = bool(rng.random() < cfg.hflip_prob)
    brightness = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
    contrast = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
    blur_sigma = 0.0
    if rng.random() < cfg.blur_prob:
        blur_sigma = float(rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max))
    return ViewParams(
        crop_rect=crop,
        output_size=cfg.output_size,
        hflip=hflip,
        photometric=Photometric(brightness=float(brightness), contrast=float(contrast),
                                blur_sigma=blur_sigma),
    )


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Resize a 2-D array to ``size`` x ``size`` with half-pixel-centered
    bilinear sampling. Resizing to the input size returns an exact copy."""
    if image.ndim != 2:
        raise GeometryError(f"expected a 2-D array, got shape {image.shape}")
    h, w = image.shape
    out = image.astype(np.float32, copy=True)
    if h == size and w == size:
        return out
    sy = (np.arange(size, dtype=np.float64) + 0.5) * (h / size) - 0.5
    sx = (np.arange(size, dtype=np.float64) + 0.5) * (w / size) - 0.5
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = (sy - y0).astype(np.float32)
    fx = (sx - x0).astype(np.float32)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = out[np.ix_(y0c, x0c)] * (1 - fx) + out[np.ix_(y0c, x1c)] * fx
    bot = out[np.ix_(y1c, x0c)] * (1 - fx) + out[np.ix_(y1c, x1c)] * fx
    return (top * (1 - fy)[:, None] + bot * fy[:, None]).astype(np.float32)


def apply_view(image: np.ndarray, params: ViewParams) -> np.ndarray:
    """Materialize one view from a 2-D source image.

    Order: crop, horizontal flip, bilinear resize, then photometric ops
    (brightness scale, contrast about the view mean, Gaussian blur).
    Returns float32 of shape ``(output_size, output_size)``.
    """
    if image.ndim != 2:
        raise GeometryError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    x, y, cw, ch = params.crop_rect
    if cw < 1 or ch < 1 or x < 0 or y < 0 or x + cw > w or y + ch > h:
        raise GeometryError(
            f"crop {params.crop_rect} does not fit inside a {h}x{w} image"
        )
    patch = image[y : y + ch, x : x + cw]
    if params.hflip:
        patch = patch[:, ::-1]
    out = resize_bilinear(np.ascontiguousarray(patch), params.output_size)
    ph = params.photometric
    if ph.brightness != 1.0:
        out = out * np.float32(ph.brightness)
    if ph.contrast != 1.0:
        mean = out.mean(dtype=np.float64).astype(np.float32)
        out = mean + (out - mean) * np.float32(ph.contrast)
    if ph.blur_sigma > 0.0:
        out = gaussian_filter(out, sigma=ph.blur_sigma, mode="nearest")
    return out.astype(np.float32, copy=False)


def intersection_region(
    params1: ViewParams, params2: ViewParams, min_side: float = 0.0
) -> Box | None:
    """Overlap of two crop rectangles, in source-image pixels.

    Both parameter records must describe views of the same source image;
    that cannot be checked here and is the caller's contract. Returns
    ``None`` when the crops do not overlap or the overlap is thinner
    than ``min_side`` on either axis.
    """
    x1, y1, w1, h1 = params1.crop_rect
    x2, y2, w2, h2 = params2.crop_rect
    ix = max(x1, x2)
    iy = max(y1, y2)
    iw = min(x1 + w1, x2 + w2) - ix
    ih = min(y1 + h1, y2 + h2) - iy
    if iw <= 0 or ih <= 0 or iw < min_side or ih < min_side:
        return None
    return Box(float(ix), float(iy), float(iw), float(ih))


def sample_boxes(
    region: Box, k: int, min_side: float, rng: np.random.Generator
) -> list[Box]:
    """Draw ``k`` boxes uniformly inside ``region`` (source-image pixels).

    Each side is uniform in [``min_side``, region side], then the
    position is uniform among placements that keep the box inside the
    region. Raises ``DegenerateRegionError`` when the region is thinner
    than ``min_side``.
    """
    if k < 1:
        raise ConfigError(f"box count must be >= 1, got {k}")
    if min_side <= 0:
        raise ConfigError(f"min_side must be positive, got {min_side}")
    if region.w < min_side or region.h < min_side:
        raise DegenerateRegionError(
            f"region {region.w:.1f}x{region.h:.1f} is smaller than min_side={min_side}"
        )
    boxes = []
    for _ in range(k):
        bw = float(rng.uniform(min_side, region.w))
        bh = float(rng.uniform(min_side, region.h))
        bx = float(rng.uniform(region.x, region.right - bw))
        by = float(rng.uniform(region.y, region.bottom - bh))
        boxes.append(Box(bx, by, bw, bh))
    return boxes


def map_box_to_view(box: Box, params: ViewParams) -> Box:
    """Map a box from source-image pixels into view pixels."""
    cx, cy, cw, ch = params.crop_rect
    s = params.output_size
    sx = s / cw
    sy = s / ch
    x = (box.x - cx) * sx
    y = (box.y - cy) * sy
    w = box.w * sx
    h = box.h * sy
    if params.hflip:
        x = s - x - w
    return Box(x, y, w, h)


def map_box_from_view(box: Box, params: ViewParams) -> Box:
    """Inverse of :func:`map_box_to_view`: view pixels to source pixels."""
    cx, cy, cw, ch = params.crop_rect
    s = params.output_size
    sx = s / cw
    sy = s / ch
    x = box.x
    if params.hflip:
        x = s - x - box.w
    return Box(cx + x / sx, cy + box.y / sy, box.w / sx, box.h / sy)


def box_to_feature_coords(box: Box, stride: int) -> Box:
    """Convert a view-pixel box into feature-map cells for a given stride."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return Box(box.x / stride, box.y / stride, box.w / stride, box.h / stride)


def _clamp_degenerate(
    x: torch.Tensor, y: torch.Tensor, w: torch.Tensor, h: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    # A box thinner than one cell becomes a unit box at the same center.
    cx = x + w / 2
    cy = y + h / 2
    w2 = torch.clamp(w, min=1.0)
    h2 = torch.clamp(h, min=1.0)
    x2 = torch.where(w < 1.0, cx - 0.5, x)
    y2 = torch.where(h < 1.0, cy - 0.5, y)
    return x2, y2, w2, h2


def roi_align_1x1_batch(fmaps: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Pool each box to a single C-vector by averaged bilinear samples.

    ``fmaps`` is ``(N, C, H, W)``; ``boxes`` is ``(N, K, 4)`` as
    ``(x, y, w, h)`` in feature-map cells of the matching map. Each box
    is sampled on a 2x2 grid at its quarter points, every sample is read
    bilinearly (cell centers at integer coordinates, borders replicated),
    and the four samples are averaged. Returns ``(N, K, C)`` and is
    differentiable with respect to ``fmaps``.
    """
    if fmaps.ndim != 4:
        raise GeometryError(f"expected (N, C, H, W) features, got shape {tuple(fmaps.shape)}")
    if boxes.ndim != 3 or boxes.shape[-1] != 4 or boxes.shape[0] != fmaps.shape[0]:
        raise GeometryError(f"expected (N, K, 4) boxes, got shape {tuple(boxes.shape)}")
    n, _, h, w = fmaps.shape
    k = boxes.shape[1]
    boxes = boxes.to(torch.float64)
    bx, by, bw, bh = boxes.unbind(dim=-1)
    bx, by, bw, bh = _clamp_degenerate(bx, by, bw, bh)

    quarters = torch.tensor([0.25, 0.75], dtype=torch.float64)
    # Sample positions in cell-index space; (N, K, 2).
    px = bx.unsqueeze(-1) + bw.unsqueeze(-1) * quarters - 0.5
    py = by.unsqueeze(-1) + bh.unsqueeze(-1) * quarters - 0.5
    # Full 2x2 grid -> (N, K, 4).
    px = px[:, :, None, :].expand(n, k, 2, 2).reshape(n, k, 4)
    py = py[:, :, :, None].expand(n, k, 2, 2).reshape(n, k, 4)

    x0 = torch.floor(px)
    y0 = torch.floor(py)
    fx = (px - x0).to(fmaps.dtype)
    fy = (py - y0).to(fmaps.dtype)
    x0 = x0.long()
    y0 = y0.long()
    x0c = x0.clamp(0, w - 1)
    x1c = (x0 + 1).clamp(0, w - 1)
    y0c = y0.clamp(0, h - 1)
    y1c = (y0 + 1).clamp(0, h - 1)

    idx = torch.arange(n).view(n, 1, 1).expand(n, k, 4)
    c00 = fmaps[idx, :, y0c, x0c]  # (N, K, 4, C)
    c01 = fmaps[idx, :, y0c, x1c]
    c10 = fmaps[idx, :, y1c, x0c]
    c11 = fmaps[idx, :, y1c, x1c]
    fx = fx.unsqueeze(-1)
    fy = fy.unsqueeze(-1)
    vals = (
        c00 * (1 - fy) * (1 - fx)
        + c01 * (1 - fy) * fx
        + c10 * fy * (1 - fx)
        + c11 * fy * fx
    )
    return vals.mean(dim=2)


def roi_align_1x1(fmap: torch.Tensor, box: Box) -> torch.Tensor:
    """Single-map, single-box form of :func:`roi_align_1x1_batch`.

    ``fmap`` is ``(C, H, W)`` and the box is in feature-map cells.
    Raises ``GeometryError`` when the box lies entirely outside the map.
    """
    if fmap.ndim != 3:
        raise GeometryError(f"expected (C, H, W) features, got shape {tuple(fmap.shape)}")
    _, h, w = fmap.shape
    if box.x >= w or box.y >= h or box.right <= 0 or box.bottom <= 0:
        raise GeometryError(
            f"box {box.as_tuple()} lies outside a {h}x{w} feature map"
        )
    boxes = torch.tensor([[box.as_tuple()]], dtype=torch.float64)
    return roi_align_1x1_batch(fmap.unsqueeze(0), boxes)[0, 0]
