"""Segmentation fine-tuning on top of a (pre-trained or random) trunk.

A light feature-pyramid decoder consumes the four backbone taps and
emits full-resolution logits. Training uses SGD with per-iteration
polynomial decay, cross-entropy (optionally plus a soft Dice term), a
deterministic sixfold augmentation of the training patches, and early
stopping on validation mean IoU.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Backbone, BackboneConfig
from .errors import ConfigError, DataError, GeometryError

log = logging.getLogger(__name__)

SEGMODEL_FORMAT = "di3cl.segmodel"
SEGMODEL_VERSION = 1


@dataclass(frozen=True)
class FinetuneConfig:
    num_classes: int = 2
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 0.01
    poly_power: float = 0.9
    weight_decay: float = 1e-4
    momentum_sgd: float = 0.9
    patience: int = 10
    use_dice: bool = False
    augment: bool = True
    freeze_backbone: bool = False
    decoder_width: int = 64
    ignore_label: int = 255
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not self.poly_power > 0:
            raise ConfigError(f"poly_power must be > 0, got {self.poly_power}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.momentum_sgd < 1.0):
            raise ConfigError(
                f"momentum_sgd must be in [0, 1), got {self.momentum_sgd}"
            )
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.decoder_width < 1:
            raise ConfigError(f"decoder_width must be >= 1, got {self.decoder_width}")
        if 0 <= self.ignore_label < self.num_classes:
            raise ConfigError(
                f"ignore_label {self.ignore_label} collides with class indices"
            )


def poly_lr(iteration: int, max_iter: int, base_lr: float, power: float = 0.9) -> float:
    """Polynomial decay ``base_lr * (1 - it/max_iter)**power``, reaching
    0 at ``max_iter``."""
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")
    if not (0 <= iteration <= max_iter):
        raise ConfigError(f"iteration {iteration} outside [0, {max_iter}]")
    if not power > 0:
        raise ConfigError(f"power must be > 0, got {power}")
    return base_lr * (1.0 - iteration / max_iter) ** power


def _conv_bn_relu(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PyramidDecoder(nn.Module):
    """Top-down fusion of the four taps into stride-4 logits.

    Each tap passes a 1x1 lateral to a common width; maps are merged
    coarse to fine by upsample-and-add with a 3x3 smoothing conv after
    every merge, then classified at stride 4.
    """

    def __init__(self, tap_channels, width: int, num_classes: int):
        super().__init__()
        self.laterals = nn.ModuleList(
            _conv_bn_relu(c, width, 1) for c in tap_channels
        )
        self.smooth = nn.ModuleList(_conv_bn_relu(width, width, 3) for _ in range(3))
        self.classify = nn.Conv2d(width, num_classes, 1)

    def forward(self, taps, out_size) -> torch.Tensor:
        feats = [lat(t) for lat, t in zip(self.laterals, taps)]
        merged = feats[3]
        for i in (2, 1, 0):
            up = F.interpolate(
                merged, size=feats[i].shape[-2:], mode="bilinear", align_corners=False
            )
            merged = self.smooth[i](feats[i] + up)
        logits = self.classify(merged)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class SegModel(nn.Module):
    """Backbone plus decoder; maps (N, 1, H, W) to (N, C, H, W) logits."""

    def __init__(self, backbone: Backbone, decoder: PyramidDecoder):
        super().__init__()
        self.backbone = backbone
        self.decoder = decoder

    @property
    def num_classes(self) -> int:
        return self.decoder.classify.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.backbone(x), x.shape[-2:])


def attach_seg_head(backbone: Backbone, num_classes: int, width: int = 64) -> SegModel:
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    return SegModel(backbone, PyramidDecoder(backbone.tap_channels, width, num_classes))


def save_seg_model(path, model: SegModel) -> None:
    """Write a self-describing segmentation model file."""
    from dataclasses import asdict

    payload = {
        "format": SEGMODEL_FORMAT,
        "version": SEGMODEL_VERSION,
        "backbone": asdict(model.backbone.cfg),
        "num_classes": model.num_classes,
        "decoder_width": model.decoder.classify.in_channels,
        "state": model.state_dict(),
    }
    torch.save(payload, path)


def load_seg_model(path) -> SegModel:
    """Rebuild a segmentation model saved by :func:`save_seg_model`."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != SEGMODEL_FORMAT:
        raise DataError(f"{path} is not a segmentation model file")
    bb = payload["backbone"]
    backbone = Backbone(
        BackboneConfig(
            stem_channels=int(bb["stem_channels"]),
            stage_channels=tuple(bb["stage_channels"]),
            blocks_per_stage=tuple(bb["blocks_per_stage"]),
            block=str(bb["block"]),
        )
    )
    model = attach_seg_head(
        backbone, int(payload["num_classes"]), int(payload["decoder_width"])
    )
    model.load_state_dict(payload["state"])
    return model


def dice_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    ignore_label: int = 255,
    eps: float = 1.0,
) -> torch.Tensor:
    """Soft Dice over classes: ``1 - mean_c (2*sum(p*g) + eps) /
    (sum(p) + sum(g) + eps)``. ``probs`` is (N, C, H, W) softmax output,
    ``target`` (N, H, W) indices; ignored pixels contribute to neither
    numerator nor denominator. Zero exactly when probabilities equal the
    one-hot target on all valid pixels.
    """
    n_classes = probs.shape[1]
    valid = (target != ignore_label).unsqueeze(1).to(probs.dtype)
    safe = torch.where(target == ignore_label, torch.zeros_like(target), target)
    onehot = F.one_hot(safe, n_classes).permute(0, 3, 1, 2).to(probs.dtype) * valid
    p = probs * valid
    inter = (p * onehot).sum(dim=(0, 2, 3))
    denom = p.sum(dim=(0, 2, 3)) + onehot.sum(dim=(0, 2, 3))
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice.mean()


def sixfold_augment(samples):
    """Expand each (image, mask) pair into six deterministic variants:
    original, three clockwise 90-degree rotations, horizontal flip,
    vertical flip, grouped per sample. Requires square patches."""
    out = []
    for image, mask in samples:
        if image.shape[-2] != image.shape[-1]:
            raise GeometryError(
                f"sixfold augmentation needs square patches, got {image.shape}"
            )
        variants = [(image, mask)]
        for k in (1, 2, 3):
            variants.append(
                (
                    np.rot90(image, k=-k, axes=(-2, -1)).copy(),
                    np.rot90(mask, k=-k).copy(),
                )
            )
        variants.append((image[..., ::-1].copy(), mask[:, ::-1].copy()))
        variants.append((image[..., ::-1, :].copy(), mask[::-1].copy()))
        out.extend(variants)
    return out


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = 255
) -> np.ndarray:
    """Accumulate a (C, C) count matrix with ground truth on rows and
    predictions on columns; pixels whose label is ``ignore_label`` are
    dropped."""
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise DataError(
            f"prediction ({pred.shape}) and ground truth ({gt.shape}) sizes differ"
        )
    keep = gt != ignore_label
    pred = pred[keep]
    gt = gt[keep]
    if pred.size and (
        pred.min() < 0 or pred.max() >= num_classes or gt.min() < 0 or gt.max() >= num_classes
    ):
        raise DataError(
            f"labels outside [0, {num_classes}): pred "
            f"[{pred.min()}, {pred.max()}], gt [{gt.min()}, {gt.max()}]"
        )
    idx = gt.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


@dataclass(frozen=True)
class MetricsReport:
    """Metrics derived from one confusion matrix.

    Per-class entries are NaN when the class never occurs in either
    ground truth or prediction; NaN entries are excluded from ``miou``.
    ``precision``/``recall``/``f1``/``iou`` are filled for the binary
    case only (positive class = 1).
    """

    confusion: np.ndarray
    oa: float
    kappa: float
    miou: float
    per_class_iou: np.ndarray
    per_class_f1: np.ndarray
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    iou: float = float("nan")

    def records(self) -> list[tuple[str, float]]:
        rows = [("oa", self.oa), ("kappa", self.kappa), ("miou", self.miou)]
        for i, (iou, f1) in enumerate(zip(self.per_class_iou, self.per_class_f1)):
            rows.append((f"iou_{i}", float(iou)))
            rows.append((f"f1_{i}", float(f1)))
        if self.confusion.shape[0] == 2:
            rows += [
                ("precision", self.precision),
                ("recall", self.recall),
                ("f1", self.f1),
                ("iou", self.iou),
            ]
        return rows

    def table(self, class_names: list[str] | None = None) -> str:
        n = self.confusion.shape[0]
        names = class_names or [f"class_{i}" for i in range(n)]
        width = max(len(s) for s in names + ["overall"]) + 2
        lines = [f"{'':<{width}}{'IoU':>8}{'F1':>8}"]
        for i in range(n):
            lines.append(
                f"{names[i]:<{width}}{self.per_class_iou[i]:>8.4f}"
                f"{self.per_class_f1[i]:>8.4f}"
            )
        lines.append(
            f"{'overall':<{width}}OA {self.oa:.4f}  kappa {self.kappa:.4f}  "
            f"mIoU {self.miou:.4f}"
        )
        return "\n".join(lines)


def compute_metrics(confusion: np.ndarray) -> MetricsReport:
    """Overall accuracy, kappa, per-class IoU/F1, and their means from a
    (C, C) matrix with ground truth on rows."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise DataError(f"expected a square matrix of size >= 2, got {cm.shape}")
    if (cm < 0).any():
        raise DataError("confusion matrix has negative counts")
    total = cm.sum()
    if total == 0:
        raise DataError("confusion matrix is empty")
    tp = np.diag(cm)
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    oa = tp.sum() / total
    pe = float((rows * cols).sum() / total**2)
    # pe == 1 forces a diagonal matrix, so agreement is perfect.
    kappa = 1.0 if math.isclose(pe, 1.0, abs_tol=1e-12) else (oa - pe) / (1.0 - pe)
    fp = cols - tp
    fn = rows - tp
    union = tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        per_iou = np.where(union > 0, tp / union, np.nan)
        per_f1 = np.where(union + tp > 0, 2 * tp / (2 * tp + fp + fn), np.nan)
    miou = float(np.nanmean(per_iou))
    report = {
        "confusion": cm.astype(np.int64),
        "oa": float(oa),
        "kappa": float(kappa),
        "miou": miou,
        "per_class_iou": per_iou,
        "per_class_f1": per_f1,
    }
    if cm.shape[0] == 2:
        tp1, fp1, fn1 = tp[1], fp[1], fn[1]
        report["precision"] = float(tp1 / (tp1 + fp1)) if tp1 + fp1 > 0 else float("nan")
        report["recall"] = float(tp1 / (tp1 + fn1)) if tp1 + fn1 > 0 else float("nan")
        report["f1"] = (
            float(2 * tp1 / (2 * tp1 + fp1 + fn1)) if 2 * tp1 + fp1 + fn1 > 0 else float("nan")
        )
        report["iou"] = float(tp1 / (tp1 + fp1 + fn1)) if tp1 + fp1 + fn1 > 0 else float("nan")
    return MetricsReport(**report)


def _stack_batch(samples, idx):
    images = torch.from_numpy(
        np.stack([np.asarray(samples[i][0], dtype=np.float32) for i in idx])
    )
    masks = torch.from_numpy(np.stack([np.asarray(samples[i][1]) for i in idx]).astype(np.int64))
    return images, masks


def evaluate(
    model: SegModel,
    samples,
    num_classes: int,
    ignore_label: int = 255,
    batch_size: int = 8,
) -> MetricsReport:
    """Confusion-matrix metrics of ``model`` over (image, mask) pairs."""
    if not samples:
        raise DataError("no evaluation samples")
    model.eval()
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    # Batch only samples of identical shape.
    by_shape: dict[tuple, list[int]] = {}
    for i, (img, _) in enumerate(samples):
        by_shape.setdefault(tuple(img.shape), []).append(i)
    with torch.no_grad():
        for idx_list in by_shape.values():
            for start in range(0, len(idx_list), batch_size):
                idx = idx_list[start : start + batch_size]
                images, masks = _stack_batch(samples, idx)
                pred = model(images).argmax(dim=1)
                cm += confusion_matrix(
                    pred.numpy(), masks.numpy(), num_classes, ignore_label
                )
    return compute_metrics(cm)


@dataclass
class FinetuneResult:
    model: SegModel
    metrics: MetricsReport
    best_epoch: int
    epochs_run: int
    history: list[float] = field(default_factory=list)


def finetune(
    train_samples,
    val_samples,
    cfg: FinetuneConfig,
    backbone: Backbone,
) -> FinetuneResult:
    """Train a segmentation model and return it at its best-validation
    weights.

    ``train_samples``/``val_samples`` are lists of ``((1, H, W) image,
    (H, W) mask)``. The trunk is taken as passed (random or pre-trained).
    By default the whole model is optimized; with ``freeze_backbone`` only
    the decoder trains while trunk weights and normalization statistics
    stay fixed. Stops early after ``patience`` epochs without a validation
    mIoU improvement.
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise DataError("need non-empty train and validation sample lists")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = attach_seg_head(backbone, cfg.num_classes, cfg.decoder_width)
    if cfg.freeze_backbone:
        model.backbone.requires_grad_(False)
    if cfg.augment:
        train_samples = sixfold_augment(train_samples)
    optimizer = torch.optim.SGD(
        (p for p in model.parameters() if p.requires_grad),
        lr=cfg.base_lr,
        momentum=cfg.momentum_sgd,
        weight_decay=cfg.weight_decay,
    )
    n = len(train_samples)
    iters_per_epoch = math.ceil(n / cfg.batch_size)
    max_iter = cfg.epochs * iters_per_epoch

    best_state = None
    best_miou = -1.0
    best_epoch = -1
    stale = 0
    history: list[float] = []
    iteration = 0
    epochs_run = 0
    for epoch in range(cfg.epochs):
        model.train()
        if cfg.freeze_backbone:
            model.backbone.eval()
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            images, masks = _stack_batch(train_samples, idx)
            lr = poly_lr(iteration, max_iter, cfg.base_lr, cfg.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = model(images)
            loss = F.cross_entropy(logits, masks, ignore_index=cfg.ignore_label)
            if cfg.use_dice:
                loss = loss + dice_loss(
                    F.softmax(logits, dim=1), masks, cfg.ignore_label
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            iteration += 1
        report = evaluate(model, val_samples, cfg.num_classes, cfg.ignore_label)
        history.append(report.miou)
        epochs_run = epoch + 1
        if report.miou > best_miou:
            best_miou = report.miou
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            stale = 0
        else:
            stale += 1
        log.info(
            "finetune epoch %d val mIoU %.4f (best %.4f @ %d)",
            epoch, report.miou, best_miou, best_epoch,
        )
        if stale >= cfg.patience:
            log.info("early stop after %d stale epochs", stale)
            break
    model.load_state_dict(best_state)
    final = evaluate(model, val_samples, cfg.num_classes, cfg.ignore_label)
    return FinetuneResult(
        model=model,
        metrics=final,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        history=history,
    )
