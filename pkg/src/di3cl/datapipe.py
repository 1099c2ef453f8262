"""Dataset scanning, raster I/O, batching, and synthetic SAR scenes.

Images are single-channel 8- or 16-bit PNG/TIFF rasters; pixel values
are scaled to [0, 1] by the full dtype range on load. Masks are 8-bit
class indices and are never scaled.

The synthetic generator builds a scene as nearest-seed regions with
class-specific mean reflectivity, overlays thin bright curvilinear
structures (last class) and dark blobs (class 0), then multiplies by
gamma-distributed speckle with unit mean.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff")
MANIFEST_CACHE = ".manifest.tsv"


@dataclass(frozen=True)
class PatchManifest:
    """Sorted listing of readable single-channel patches under a root.

    ``patch_size`` is the common square size when every entry agrees,
    else 0. ``skipped`` lists files that matched an image extension but
    could not be used, with a reason each.
    """

    root: str
    entries: tuple[tuple[str, int, int], ...]  # (relative path, height, width)
    patch_size: int
    skipped: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def paths(self) -> list[Path]:
        return [Path(self.root) / rel for rel, _, _ in self.entries]


def _probe_image(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        if im.mode not in ("L", "I", "I;16", "I;16B", "F"):
            raise DataError(f"{path.name}: mode {im.mode} is not single-channel")
        w, h = im.size
    return h, w


def scan_dataset(root: str | Path, use_cache: bool = True) -> PatchManifest:
    """Walk ``root`` for patch rasters and build a manifest.

    Files are ordered lexicographically by relative path. Unreadable or
    multi-channel files are skipped and reported, not fatal; an empty
    result is a ``DataError``. The manifest is cached inside the root
    as a dot-file and reused while the file listing is unchanged.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    files = sorted(
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
    cache_path = root / MANIFEST_CACHE
    if use_cache and cache_path.is_file():
        cached = _read_cache(cache_path, root)
        if cached is not None and sorted(
            [e[0] for e in cached.entries] + list(cached.skipped)
        ) == files:
            return cached

    entries: list[tuple[str, int, int]] = []
    skipped: list[str] = []
    for rel in files:
        try:
            h, w = _probe_image(root / rel)
        except (DataError, OSError) as exc:
            log.warning("skipping %s: %s", rel, exc)
            skipped.append(rel)
            continue
        entries.append((rel, h, w))
    if not entries:
        raise DataError(f"no readable single-channel patches under {root}")
    sizes = {(h, w) for _, h, w in entries}
    patch_size = entries[0][1] if sizes == {(entries[0][1], entries[0][1])} else 0
    manifest = PatchManifest(
        root=str(root),
        entries=tuple(entries),
        patch_size=patch_size,
        skipped=tuple(skipped),
    )
    if use_cache:
        _write_cache(cache_path, manifest)
    return manifest


def _write_cache(path: Path, manifest: PatchManifest) -> None:
    lines = [f"#size\t{manifest.patch_size}"]
    lines += [f"{rel}\t{h}\t{w}" for rel, h, w in manifest.entries]
    lines += [f"#skip\t{rel}" for rel in manifest.skipped]
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        log.warning("could not write manifest cache %s: %s", path, exc)


def _read_cache(path: Path, root: Path) -> PatchManifest | None:
    try:
        lines = path.read_text().splitlines()
    except OSError:
        return None
    entries: list[tuple[str, int, int]] = []
    skipped: list[str] = []
    patch_size = 0
    for line in lines:
        if not line.strip():
            continue
        parts = line.split("\t")
        if parts[0] == "#size" and len(parts) == 2:
            patch_size = int(parts[1])
        elif parts[0] == "#skip" and len(parts) == 2:
            skipped.append(parts[1])
        elif len(parts) == 3:
            entries.append((parts[0], int(parts[1]), int(parts[2])))
        else:
            return None
    if not entries:
        return None
    return PatchManifest(
        root=str(root), entries=tuple(entries), patch_size=patch_size,
        skipped=tuple(skipped),
    )


def load_patch(path: str | Path) -> np.ndarray:
    """Read one raster as float32 ``(1, H, W)`` scaled to [0, 1].

    8-bit data is divided by 255, 16-bit by 65535; float rasters are
    clipped to [0, 1].
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{path.name}: expected single-channel data, got shape {arr.shape}")
    if mode == "L" or arr.dtype == np.uint8:
        out = arr.astype(np.float32) / 255.0
    elif arr.dtype == np.uint16:
        out = arr.astype(np.float32) / 65535.0
    elif arr.dtype in (np.int32, np.int64):
        # PIL mode "I" holds 16-bit data in 32-bit integers.
        out = arr.astype(np.float32) / 65535.0
    elif np.issubdtype(arr.dtype, np.floating):
        out = np.clip(arr.astype(np.float32), 0.0, 1.0)
    else:
        raise DataError(f"{path.name}: unsupported pixel type {arr.dtype}")
    return np.clip(out, 0.0, 1.0)[None]


def save_image(path: str | Path, image: np.ndarray, bits: int = 16) -> None:
    """Write a [0, 1] float image as an 8- or 16-bit gray raster."""
    image = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        data = np.round(image * 65535.0).astype(np.uint16)
        # uint16 infers mode I;16; passing mode= explicitly is deprecated.
        Image.fromarray(data).save(path)
    elif bits == 8:
        data = np.round(image * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(path)
    else:
        raise ConfigError(f"bits must be 8 or 16, got {bits}")


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write integer class indices as an 8-bit raster, unscaled."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise DataError(f"mask values outside uint8 range: [{mask.min()}, {mask.max()}]")
    Image.fromarray(mask.astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Read an 8-bit mask raster as int64 class indices, unscaled."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"{Path(path).name}: expected a single-channel mask")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic scene knobs.

    ``speckle_looks`` sets the gamma shape; the multiplicative noise has
    unit mean and standard deviation ``1/sqrt(looks)``. Values above 1e6
    are clamped, which makes the scene effectively noiseless.
    """

    scene_size: int = 512
    n_classes: int = 4
    region_count: int = 24
    speckle_looks: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        if self.scene_size < 8:
            raise ConfigError(f"scene_size must be >= 8, got {self.scene_size}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.region_count < self.n_classes:
            raise ConfigError(
                f"region_count ({self.region_count}) must be >= n_classes "
                f"({self.n_classes}) so every class appears"
            )
        if not self.speckle_looks > 0:
            raise ConfigError(f"speckle_looks must be > 0, got {self.speckle_looks}")


def class_reflectivity(n_classes: int) -> np.ndarray:
    """Mean reflectivity per class: class 0 dark (water-like), the last
    class bright (road-like), the rest spread between."""
    if n_classes < 2:
        raise ConfigError(f"n_classes must be >= 2, got {n_classes}")
    means = np.empty(n_classes, dtype=np.float64)
    means[0] = 0.05
    means[-1] = 0.90
    if n_classes > 2:
        means[1:-1] = np.linspace(0.2, 0.65, n_classes - 2)
    return means


def _nearest_seed_labels(size: int, seeds: np.ndarray, chunk: int = 64) -> np.ndarray:
    labels = np.empty((size, size), dtype=np.int64)
    xs = np.arange(size, dtype=np.float64)
    for r0 in range(0, size, chunk):
        r1 = min(r0 + chunk, size)
        ys = np.arange(r0, r1, dtype=np.float64)
        dy2 = (ys[:, None] - seeds[None, :, 1]) ** 2  # (rows, R)
        dx2 = (xs[:, None] - seeds[None, :, 0]) ** 2  # (cols, R)
        d = dy2[:, None, :] + dx2[None, :, :]  # (rows, cols, R)
        labels[r0:r1] = np.argmin(d, axis=2)
    return labels


def _paint_disk(mask: np.ndarray, cy: float, cx: float, radius: float, value: int) -> None:
    size = mask.shape[0]
    r = int(math.ceil(radius))
    y0, y1 = max(0, int(cy) - r), min(size, int(cy) + r + 2)
    x0, x1 = max(0, int(cx) - r), min(size, int(cx) + r + 2)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    mask[y0:y1, x0:x1][inside] = value


def synth_scene(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Generate one ``(image, mask)`` pair, both ``scene_size`` square.

    The mask is int64 class indices covering every class; the image is
    float32 in [0, 1]. Region boundaries in the noiseless reflectivity
    map coincide exactly with mask boundaries; speckle is pixel-wise
    multiplicative, so alignment is preserved.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    size = cfg.scene_size
    n = cfg.n_classes

    seeds = rng.uniform(0, size, size=(cfg.region_count, 2))
    region_class = np.concatenate(
        [
            np.arange(n, dtype=np.int64),
            rng.integers(0, n, size=cfg.region_count - n),
        ]
    )
    rng.shuffle(region_class)
    mask = region_class[_nearest_seed_labels(size, seeds)]

    # Dark blobs of class 0: elliptical patches.
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 32, size / 10, size=2)
        theta = rng.uniform(0, math.pi)
        r_max = max(ry, rx)
        y0, y1 = max(0, int(cy - r_max) - 1), min(size, int(cy + r_max) + 2)
        x0, x1 = max(0, int(cx - r_max) - 1), min(size, int(cx + r_max) + 2)
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dy, dx = yy - cy, xx - cx
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        mask[y0:y1, x0:x1][(u / rx) ** 2 + (v / ry) ** 2 <= 1.0] = 0

    # Thin bright curves of the last class: random walks with momentum.
    for _ in range(int(rng.integers(2, 5))):
        y, x = rng.uniform(0, size, size=2)
        heading = rng.uniform(0, 2 * math.pi)
        radius = float(rng.uniform(1.0, 2.5))
        for _ in range(int(size * 1.5)):
            _paint_disk(mask, y, x, radius, n - 1)
            heading += rng.normal(0.0, 0.15)
            y += math.sin(heading)
            x += math.cos(heading)
            if not (-radius < y < size + radius and -radius < x < size + radius):
                break

    # Guarantee coverage: reassert one pixel per missing class.
    present = np.unique(mask)
    for cls in range(n):
        if cls not in present:
            iy, ix = rng.integers(0, size, size=2)
            mask[iy, ix] = cls

    means = class_reflectivity(n)
    clean = means[mask]
    looks = min(cfg.speckle_looks, 1e6)
    speckle = rng.gamma(shape=looks, scale=1.0 / looks, size=(size, size))
    image = np.clip(clean * speckle, 0.0, 1.0)
    return image.astype(np.float32), mask.astype(np.int64)


def synth_patches(
    cfg: SynthConfig,
    count: int,
    patch_size: int,
    rng: np.random.Generator,
    with_masks: bool = False,
):
    """Cut ``count`` square patches from freshly generated scenes.

    Scenes are seeded from ``rng``; patches are taken on a non-overlapping
    grid per scene, shuffled. Returns a list of ``(1, P, P)`` images, or
    ``(image, mask)`` tuples when ``with_masks`` is set.
    """
    if patch_size > cfg.scene_size:
        raise ConfigError(
            f"patch_size {patch_size} exceeds scene_size {cfg.scene_size}"
        )
    out = []
    while len(out) < count:
        scene_cfg = SynthConfig(
            scene_size=cfg.scene_size,
            n_classes=cfg.n_classes,
            region_count=cfg.region_count,
            speckle_looks=cfg.speckle_looks,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        image, mask = synth_scene(scene_cfg)
        cells = cfg.scene_size // patch_size
        coords = [(r, c) for r in range(cells) for c in range(cells)]
        rng.shuffle(coords)
        for r, c in coords:
            if len(out) >= count:
                break
            y, x = r * patch_size, c * patch_size
            img = image[y : y + patch_size, x : x + patch_size][None]
            if with_masks:
                out.append((img, mask[y : y + patch_size, x : x + patch_size]))
            else:
                out.append(img)
    return out


class ManifestDataset:
    """Sequence view over a manifest; items are ``(1, H, W)`` float32."""

    def __init__(self, manifest: PatchManifest):
        self._paths = manifest.paths()

    def __len__(self) -> int:
        return len(self._paths)

    def __getitem__(self, i: int) -> np.ndarray:
        return load_patch(self._paths[i])


def make_batches(source, batch_size: int, rng: np.random.Generator, drop_last: bool = True):
    """Yield shuffled ``(N, 1, H, W)`` float32 batches from ``source``.

    ``source`` is a :class:`PatchManifest` or any sequence of ``(1, H, W)``
    arrays. One full shuffle per call; with ``drop_last`` the tail
    shorter than ``batch_size`` is dropped. The order is a pure function
    of the generator state.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    items = ManifestDataset(source) if isinstance(source, PatchManifest) else source
    total = len(items)
    if total == 0:
        raise DataError("empty dataset")
    order = rng.permutation(total)
    usable = total - (total % batch_size) if drop_last else total
    for start in range(0, usable, batch_size):
        chunk = order[start : start + batch_size]
        yield np.stack([np.asarray(items[int(i)], dtype=np.float32) for i in chunk])


def load_seg_dir(root: str | Path) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load an ``images/`` + ``masks/`` directory pair of same-stem rasters.

    Returns ``(image (1, H, W) float32, mask (H, W) int64)`` tuples in
    lexicographic stem order. Missing masks are a ``DataError``.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")
    samples = []
    for img_path in sorted(img_dir.iterdir()):
        if img_path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        matches = [
            mask_dir / (img_path.stem + ext)
            for ext in IMAGE_EXTENSIONS
            if (mask_dir / (img_path.stem + ext)).is_file()
        ]
        if not matches:
            raise DataError(f"no mask found for {img_path.name}")
        samples.append((load_patch(img_path), load_mask(matches[0])))
    if not samples:
        raise DataError(f"no image/mask pairs under {root}")
    return samples
