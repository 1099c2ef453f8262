"""Full-scene segmentation by overlapping sliding windows.

A plan fixes the tile grid: offsets step by ``stride`` and a final
clamped offset guarantees the far edge is covered. Per-pixel class
probabilities from every covering tile are averaged, then argmax picks
the label (ties go to the lowest class index). ``infer_scene`` streams
tiles row by row and never holds more than one window-height band of
probability accumulators; its output is identical to the full-memory
``stitch`` because both add tile probabilities in plan order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datapipe import load_patch, save_mask
from .errors import ConfigError, DataError
from .geometry import resize_bilinear  # noqa: F401  (re-exported for scene prep)

log = logging.getLogger(__name__)

# Distinct colors for rendered label maps; index = class.
PALETTE: tuple[tuple[int, int, int], ...] = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 212),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
)


@dataclass(frozen=True)
class TilePlan:
    """Tile grid for one scene.

    Offsets are top-left corners in the padded frame, row-major. When
    the scene is smaller than the window on an axis it is reflected out
    to ``padded_size`` and ``padded`` is set.
    """

    window: int
    stride: int
    scene_size: tuple[int, int]
    padded_size: tuple[int, int]
    row_offsets: tuple[int, ...]
    col_offsets: tuple[int, ...]

    @property
    def padded(self) -> bool:
        return self.padded_size != self.scene_size

    @property
    def offsets(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.row_offsets for c in self.col_offsets]

    def __len__(self) -> int:
        return len(self.row_offsets) * len(self.col_offsets)


def _axis_offsets(length: int, window: int, stride: int) -> tuple[int, ...]:
    offs = list(range(0, length - window + 1, stride))
    if offs[-1] != length - window:
        offs.append(length - window)
    return tuple(offs)


def plan_tiles(scene_size: tuple[int, int], window: int, stride: int) -> TilePlan:
    """Lay out the tile grid covering a ``(H, W)`` scene.

    Every pixel is covered by at least one tile; offsets on each axis
    are ``0, stride, 2*stride, ...`` plus a final offset clamped to
    ``size - window`` when the regular grid stops short.
    """
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if not (1 <= stride <= window):
        raise ConfigError(f"stride must be in [1, window], got {stride}")
    h, w = scene_size
    if h < 1 or w < 1:
        raise ConfigError(f"scene size must be positive, got {scene_size}")
    ph, pw = max(h, window), max(w, window)
    return TilePlan(
        window=window,
        stride=stride,
        scene_size=(h, w),
        padded_size=(ph, pw),
        row_offsets=_axis_offsets(ph, window, stride),
        col_offsets=_axis_offsets(pw, window, stride),
    )


def _collect_tiles(tile_probs, plan: TilePlan) -> list[np.ndarray]:
    """Align tile probabilities with plan order.

    Accepts either a sequence in plan order or an iterable of
    ``(plan_index, probs)`` pairs in any order; every plan slot must be
    filled exactly once.
    """
    n = len(plan)
    slots: list = [None] * n
    for i, item in enumerate(tile_probs):
        if isinstance(item, tuple) and len(item) == 2 and np.isscalar(item[0]):
            idx, probs = int(item[0]), item[1]
        else:
            idx, probs = i, item
        if not (0 <= idx < n):
            raise DataError(f"tile index {idx} outside plan of {n} tiles")
        if slots[idx] is not None:
            raise DataError(f"tile {idx} supplied twice")
        probs = np.asarray(probs)
        if probs.ndim != 3 or probs.shape[1:] != (plan.window, plan.window):
            raise DataError(
                f"tile {idx}: expected (C, {plan.window}, {plan.window}) "
                f"probabilities, got {probs.shape}"
            )
        slots[idx] = probs
    missing = [i for i, s in enumerate(slots) if s is None]
    if missing:
        raise DataError(f"plan incomplete: missing tiles {missing[:8]}")
    return slots


def stitch(tile_probs, plan: TilePlan) -> np.ndarray:
    """Full-memory reference: average probabilities of all covering
    tiles per pixel, argmax, crop padding. Tile order does not affect
    the result (accumulation always runs in plan order)."""
    slots = _collect_tiles(tile_probs, plan)
    n_classes = slots[0].shape[0]
    if any(s.shape[0] != n_classes for s in slots):
        raise DataError("tiles disagree on the number of classes")
    ph, pw = plan.padded_size
    win = plan.window
    acc = np.zeros((n_classes, ph, pw), dtype=np.float64)
    count = np.zeros((ph, pw), dtype=np.float64)
    for (r, c), probs in zip(plan.offsets, slots):
        acc[:, r : r + win, c : c + win] += probs.astype(np.float64)
        count[r : r + win, c : c + win] += 1.0
    labels = np.argmax(acc / count, axis=0).astype(np.int64)
    h, w = plan.scene_size
    return labels[:h, :w]


def tile_probabilities(model, tile: np.ndarray) -> np.ndarray:
    """Class probabilities for one ``(win, win)`` tile: softmax over the
    model's logits, as float32 ``(C, win, win)``. Single-tile forward in
    eval mode, so the result does not depend on batch composition."""
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(tile, dtype=np.float32))[None, None]
        logits = model(x)
        probs = torch.softmax(logits, dim=1)[0]
    return probs.numpy()


def infer_scene(
    model,
    scene,
    window: int,
    stride: int,
    out_dir: str | Path | None = None,
    stem: str = "scene",
    palette=PALETTE,
) -> np.ndarray:
    """Segment a whole scene with bounded memory.

    ``scene`` is a raster path or a ``(H, W)`` float array in [0, 1].
    Tiles are evaluated row-major; the probability accumulator covers
    only the current window-height band, and finished rows are reduced
    to labels as soon as no further tile can touch them. The labels
    equal ``stitch`` over the same tiles bit for bit.

    When ``out_dir`` is given, writes ``<stem>_labels.png`` (class
    indices) and ``<stem>_rgb.png`` (palette rendering).
    """
    if isinstance(scene, (str, Path)):
        scene = load_patch(scene)[0]
    scene = np.asarray(scene, dtype=np.float32)
    if scene.ndim != 2:
        raise DataError(f"expected a 2-D scene, got shape {scene.shape}")
    plan = plan_tiles(scene.shape, window, stride)
    ph, pw = plan.padded_size
    h, w = plan.scene_size
    if plan.padded:
        scene = np.pad(scene, ((0, ph - h), (0, pw - w)), mode="reflect")
        log.info("scene padded from %s to %s", (h, w), (ph, pw))

    labels = np.empty((ph, pw), dtype=np.int64)
    acc = None
    count = np.zeros((window, pw), dtype=np.float64)
    rows = plan.row_offsets
    for i, r in enumerate(rows):
        for c in plan.col_offsets:
            probs = tile_probabilities(
                model, scene[r : r + window, c : c + window]
            ).astype(np.float64)
            if acc is None:
                acc = np.zeros((probs.shape[0], window, pw), dtype=np.float64)
            acc[:, :, c : c + window] += probs
            count[:, c : c + window] += 1.0
        next_r = rows[i + 1] if i + 1 < len(rows) else r + window
        shift = next_r - r
        # Rows [r, next_r) can no longer be touched; finalize them.
        labels[r:next_r] = np.argmax(acc[:, :shift] / count[:shift], axis=0)
        acc[:, : window - shift] = acc[:, shift:]
        acc[:, window - shift :] = 0.0
        count[: window - shift] = count[shift:]
        count[window - shift :] = 0.0
    labels = labels[:h, :w]

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_mask(out_dir / f"{stem}_labels.png", labels)
        Image.fromarray(render_labels(labels, palette), mode="RGB").save(
            out_dir / f"{stem}_rgb.png"
        )
        log.info("wrote %s_labels.png and %s_rgb.png under %s", stem, stem, out_dir)
    return labels


def render_labels(labels: np.ndarray, palette=PALETTE) -> np.ndarray:
    """Map class indices to RGB with the palette; (H, W) -> (H, W, 3)."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= len(palette):
        raise DataError(
            f"labels outside palette range [0, {len(palette)}): "
            f"[{labels.min()}, {labels.max()}]"
        )
    lut = np.asarray(palette, dtype=np.uint8)
    return lut[labels]
