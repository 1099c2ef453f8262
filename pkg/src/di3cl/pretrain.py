"""Contrastive pre-training loop.

One step: sample two views per patch, compute the deep InfoNCE term, the
shallow InfoNCE term, and the local box term, combine, backprop through
the online stack only, EMA-update the target, then enqueue the target
projections into both banks. Checkpoints are written once per epoch and
carry model, optimizer, bank, and RNG state, so an interrupted run
resumed from its last checkpoint reproduces the uninterrupted run
step for step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .datapipe import make_batches
from .encoder import (
    Backbone,
    BackboneConfig,
    EncoderConfig,
    NetworkPair,
    Preset,
    ema_update,
    get_preset,
    global_pool,
    project,
)
from .errors import ConfigError, DataError, GeometryError
from .geometry import (
    AugmentConfig,
    apply_view,
    box_to_feature_coords,
    intersection_region,
    map_box_to_view,
    roi_align_1x1_batch,
    sample_boxes,
    sample_view_params,
)
from .losses import LossConfig, LossReport, cc_loss, combine, di_loss, info_nce
from .losses import _as_float as _loss_value
from .memorybank import MemoryBank

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "di3cl.pretrain.checkpoint"
CHECKPOINT_VERSION = 1
_VIEW_PAIR_TRIES = 10


@dataclass(frozen=True)
class PretrainConfig:
    """Optimization and sampling knobs for pre-training."""

    epochs: int = 300
    batch_size: int = 256
    base_lr: float = 0.09
    min_lr: float = 0.0
    weight_decay: float = 1e-4
    momentum_sgd: float = 0.9
    k_boxes: int = 8
    min_side: float = 32.0
    bank_capacity: int = 0  # 0 selects the preset default
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.min_lr < 0 or self.min_lr > self.base_lr:
            raise ConfigError(
                f"min_lr must be in [0, base_lr], got {self.min_lr}"
            )
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.momentum_sgd < 1.0):
            raise ConfigError(
                f"momentum_sgd must be in [0, 1), got {self.momentum_sgd}"
            )
        if self.k_boxes < 1:
            raise ConfigError(f"k_boxes must be >= 1, got {self.k_boxes}")
        if not self.min_side > 0:
            raise ConfigError(f"min_side must be > 0, got {self.min_side}")
        if self.bank_capacity < 0:
            raise ConfigError(
                f"bank_capacity must be >= 0, got {self.bank_capacity}"
            )


@dataclass
class TrainState:
    """Everything a training step reads or mutates."""

    pair: NetworkPair
    deep_bank: MemoryBank
    shallow_bank: MemoryBank
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    cfg: PretrainConfig
    loss_cfg: LossConfig
    aug_cfg: AugmentConfig
    step: int = 0
    epoch: int = 0


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Half-cosine decay from ``base_lr`` at step 0 to ``min_lr`` at
    ``total_steps``."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if min_lr > base_lr:
        raise ConfigError(f"min_lr {min_lr} exceeds base_lr {base_lr}")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


def make_views(
    images: np.ndarray,
    aug_cfg: AugmentConfig,
    min_side: float,
    rng: np.random.Generator,
):
    """Sample an overlapping view pair per patch.

    ``images`` is ``(N, 1, H, W)``. Pairs are redrawn up to ten times
    until the crops overlap by at least ``min_side`` on both axes; after
    that, both views fall back to the full-frame crop (photometrics stay
    random), which always overlaps. Returns
    ``(views1, views2, params1, params2, regions)`` with views
    ``(N, 1, S, S)`` float32 and regions in source-image pixels.
    """
    n = images.shape[0]
    s = aug_cfg.output_size
    views1 = np.empty((n, 1, s, s), dtype=np.float32)
    views2 = np.empty((n, 1, s, s), dtype=np.float32)
    params1, params2, regions = [], [], []
    full_cfg = replace(aug_cfg, scale_min=1.0, scale_max=1.0, ratio_min=1.0, ratio_max=1.0)
    for i in range(n):
        img = images[i, 0]
        src = img.shape
        if src[0] < min_side or src[1] < min_side:
            raise GeometryError(
                f"patch {src} is smaller than min_side={min_side}"
            )
        p1 = p2 = region = None
        for _ in range(_VIEW_PAIR_TRIES):
            c1 = sample_view_params(rng, aug_cfg, src)
            c2 = sample_view_params(rng, aug_cfg, src)
            reg = intersection_region(c1, c2, min_side=min_side)
            if reg is not None:
                p1, p2, region = c1, c2, reg
                break
        if region is None:
            p1 = sample_view_params(rng, full_cfg, src)
            p2 = sample_view_params(rng, full_cfg, src)
            region = intersection_region(p1, p2, min_side=min_side)
        views1[i, 0] = apply_view(img, p1)
        views2[i, 0] = apply_view(img, p2)
        params1.append(p1)
        params2.append(p2)
        regions.append(region)
    return views1, views2, params1, params2, regions


def _box_tensors(regions, params1, params2, k: int, min_side: float, stride: int, rng):
    n = len(regions)
    b1 = np.empty((n, k, 4), dtype=np.float64)
    b2 = np.empty((n, k, 4), dtype=np.float64)
    for i in range(n):
        boxes = sample_boxes(regions[i], k, min_side, rng)
        for j, box in enumerate(boxes):
            b1[i, j] = box_to_feature_coords(
                map_box_to_view(box, params1[i]), stride
            ).as_tuple()
            b2[i, j] = box_to_feature_coords(
                map_box_to_view(box, params2[i]), stride
            ).as_tuple()
    return torch.from_numpy(b1), torch.from_numpy(b2)


def _direction(pair, x_query, x_key, boxes_q, boxes_k, state: TrainState):
    """One query/key ordering of a step. Returns the three loss values
    plus the detached target projections for enqueueing."""
    loss_cfg = state.loss_cfg
    taps_q = pair.online.taps(x_query)
    with torch.no_grad():
        taps_k = pair.target.taps(x_key)
        key_deep = project(pair.target.proj_deep, global_pool(taps_k.deep))
        key_shallow = project(pair.target.proj_shallow, global_pool(taps_k.shallow))

    query_deep = project(pair.online.proj_deep, global_pool(taps_q.deep))
    l_d = info_nce(query_deep, key_deep, state.deep_bank.negatives(), loss_cfg.tau)

    l_s = 0.0
    if loss_cfg.enable_cc:
        query_shallow = project(pair.online.proj_shallow, global_pool(taps_q.shallow))
        l_s = cc_loss(
            query_shallow, key_shallow, state.shallow_bank.negatives(), loss_cfg.tau
        )

    l_l = 0.0
    if loss_cfg.enable_di:
        pooled_q = roi_align_1x1_batch(taps_q.deep, boxes_q)
        with torch.no_grad():
            pooled_k = roi_align_1x1_batch(taps_k.deep, boxes_k)
        flat_q = pooled_q.reshape(-1, pooled_q.shape[-1])
        flat_k = pooled_k.reshape(-1, pooled_k.shape[-1])
        pred = pair.predictor(project(pair.online.proj_local, flat_q))
        with torch.no_grad():
            key_local = project(pair.target.proj_local, flat_k)
        l_l = di_loss(pred, key_local)

    return l_d, l_s, l_l, key_deep, key_shallow


def train_step(batch: np.ndarray, state: TrainState) -> LossReport:
    """Run one optimization step on a ``(N, 1, H, W)`` batch.

    Order is fixed: forward both directions, combine, backward, optimizer
    step, EMA update, then enqueue the target keys. Negatives seen by
    this step therefore never include this step's own keys.
    """
    cfg, loss_cfg = state.cfg, state.loss_cfg
    views1, views2, params1, params2, regions = make_views(
        batch, state.aug_cfg, cfg.min_side, state.rng
    )
    boxes1 = boxes2 = None
    if loss_cfg.enable_di:
        stride = state.pair.online.backbone.tap_strides[-1]
        boxes1, boxes2 = _box_tensors(
            regions, params1, params2, cfg.k_boxes, cfg.min_side, stride, state.rng
        )
    x1 = torch.from_numpy(views1)
    x2 = torch.from_numpy(views2)

    l_d, l_s, l_l, key_deep, key_shallow = _direction(
        state.pair, x1, x2, boxes1, boxes2, state
    )
    if loss_cfg.symmetric:
        r_d, r_s, r_l, _, _ = _direction(state.pair, x2, x1, boxes2, boxes1, state)
        l_d = (l_d + r_d) / 2
        l_s = (l_s + r_s) / 2
        l_l = (l_l + r_l) / 2

    total = combine(l_d, l_s, l_l, loss_cfg, step=state.step)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()

    ema_update(state.pair)
    state.deep_bank.enqueue(key_deep)
    state.shallow_bank.enqueue(key_shallow)

    report = LossReport(
        step=state.step,
        l_d=_loss_value(l_d),
        l_s=_loss_value(l_s),
        l_l=_loss_value(l_l),
        total=_loss_value(total),
    )
    state.step += 1
    return report


def warmup_banks(state: TrainState, dataset) -> None:
    """Fill both banks with target projections; no optimizer steps.

    Loops over the dataset (fresh shuffles) until both banks are full,
    so datasets smaller than the bank capacity still warm up.
    """
    target = state.pair.target
    cfg = state.cfg
    filled_before = len(state.deep_bank)
    while not (state.deep_bank.full and state.shallow_bank.full):
        for batch in make_batches(dataset, cfg.batch_size, state.rng, drop_last=False):
            if state.deep_bank.full and state.shallow_bank.full:
                break
            n = batch.shape[0]
            s = state.aug_cfg.output_size
            views = np.empty((n, 1, s, s), dtype=np.float32)
            for i in range(n):
                p = sample_view_params(state.rng, state.aug_cfg, batch[i, 0].shape)
                views[i, 0] = apply_view(batch[i, 0], p)
            with torch.no_grad():
                taps = target.taps(torch.from_numpy(views))
                key_deep = project(target.proj_deep, global_pool(taps.deep))
                key_shallow = project(target.proj_shallow, global_pool(taps.shallow))
            state.deep_bank.enqueue(key_deep)
            state.shallow_bank.enqueue(key_shallow)
    log.info(
        "warm-up filled banks to %d entries (%d new)",
        len(state.deep_bank),
        len(state.deep_bank) - filled_before,
    )


def _checkpoint_payload(state: TrainState, epoch_losses: list[float]) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder": asdict(state.pair.cfg),
        "pretrain": asdict(state.cfg),
        "loss": asdict(state.loss_cfg),
        "augment": asdict(state.aug_cfg),
        "epoch": state.epoch,
        "step": state.step,
        "model": state.pair.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "deep_bank": state.deep_bank.state_dict(),
        "shallow_bank": state.shallow_bank.state_dict(),
        "rng": state.rng.bit_generator.state,
        "epoch_losses": list(epoch_losses),
    }


def save_checkpoint(path: str | Path, state: TrainState, epoch_losses: list[float]) -> None:
    """Atomically write a full-resume checkpoint."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(_checkpoint_payload(state, epoch_losses), tmp)
    tmp.replace(path)


def _load_payload(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a pre-training checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint version {payload.get('version')} is not supported"
        )
    return payload


def encoder_config_from_dict(data: dict) -> EncoderConfig:
    bb = data["backbone"]
    return EncoderConfig(
        backbone=BackboneConfig(
            stem_channels=int(bb["stem_channels"]),
            stage_channels=tuple(bb["stage_channels"]),
            blocks_per_stage=tuple(bb["blocks_per_stage"]),
            block=str(bb["block"]),
        ),
        head_hidden=int(data["head_hidden"]),
        head_out=int(data["head_out"]),
        cc_tap=int(data["cc_tap"]),
        ema_momentum=float(data["ema_momentum"]),
    )


def load_checkpoint(path: str | Path, state: TrainState) -> list[float]:
    """Restore ``state`` in place; returns the stored per-epoch losses.

    The stored encoder and pre-training configs must match the current
    ones (``epochs`` may differ, so a finished run can be extended).
    """
    payload = _load_payload(path)
    if encoder_config_from_dict(payload["encoder"]) != state.pair.cfg:
        raise ConfigError("checkpoint encoder config does not match the current one")
    stored = dict(payload["pretrain"])
    current = asdict(state.cfg)
    for key in current:
        if key == "epochs":
            continue
        if stored.get(key) != current[key]:
            raise ConfigError(
                f"checkpoint pretrain.{key}={stored.get(key)!r} does not match "
                f"current {current[key]!r}"
            )
    state.pair.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.deep_bank.load_state_dict(payload["deep_bank"])
    state.shallow_bank.load_state_dict(payload["shallow_bank"])
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = payload["rng"]
    state.epoch = int(payload["epoch"])
    state.step = int(payload["step"])
    return [float(v) for v in payload["epoch_losses"]]


def load_pretrained_backbone(path: str | Path) -> Backbone:
    """Build a backbone from a checkpoint's online trunk weights."""
    payload = _load_payload(path)
    cfg = encoder_config_from_dict(payload["encoder"])
    backbone = Backbone(cfg.backbone)
    prefix = "online.backbone."
    weights = {
        k[len(prefix) :]: v for k, v in payload["model"].items() if k.startswith(prefix)
    }
    backbone.load_state_dict(weights)
    return backbone


def _latest_checkpoint(ckpt_dir: Path) -> Path | None:
    if not ckpt_dir.is_dir():
        return None
    files = sorted(ckpt_dir.glob("ckpt_epoch*.pt"))
    return files[-1] if files else None


def _truncate_metrics(path: Path, next_step: int) -> None:
    # Drop log lines from steps the resumed run will redo.
    if not path.is_file():
        return
    kept = []
    for line in path.read_text().splitlines():
        try:
            step = int(line.split("\t", 1)[0])
        except (ValueError, IndexError):
            continue
        if step < next_step:
            kept.append(line)
    path.write_text("\n".join(kept) + ("\n" if kept else ""))


def make_state(
    cfg: PretrainConfig,
    loss_cfg: LossConfig,
    aug_cfg: AugmentConfig,
    preset: Preset,
) -> TrainState:
    """Build a fresh training state (networks, banks, optimizer, RNG)."""
    cfg.validate()
    loss_cfg.validate()
    aug_cfg.validate()
    capacity = cfg.bank_capacity if cfg.bank_capacity > 0 else preset.bank_capacity
    if capacity < cfg.batch_size:
        raise ConfigError(
            f"bank capacity {capacity} is smaller than batch_size {cfg.batch_size}"
        )
    torch.manual_seed(cfg.seed)
    pair = NetworkPair(preset.encoder)
    optimizer = torch.optim.SGD(
        pair.trainable_parameters(),
        lr=cfg.base_lr,
        momentum=cfg.momentum_sgd,
        weight_decay=cfg.weight_decay,
    )
    dim = preset.encoder.head_out
    return TrainState(
        pair=pair,
        deep_bank=MemoryBank(capacity, dim),
        shallow_bank=MemoryBank(capacity, dim),
        optimizer=optimizer,
        rng=np.random.default_rng(cfg.seed),
        cfg=cfg,
        loss_cfg=loss_cfg,
        aug_cfg=aug_cfg,
    )


def run_pretraining(
    dataset,
    run_dir: str | Path,
    cfg: PretrainConfig,
    loss_cfg: LossConfig | None = None,
    aug_cfg: AugmentConfig | None = None,
    preset: Preset | None = None,
    resume: bool = True,
    log_every: int = 50,
) -> Path:
    """Train from scratch (or resume) and return the path of the
    checkpoint with the lowest mean training loss.

    ``dataset`` is a manifest or a sequence of ``(1, H, W)`` patches.
    Writes per-step losses to ``metrics.log`` and one checkpoint per
    epoch under ``checkpoints/`` in ``run_dir``.
    """
    loss_cfg = loss_cfg or LossConfig()
    aug_cfg = aug_cfg or AugmentConfig()
    preset = preset or get_preset("tiny")
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    state = make_state(cfg, loss_cfg, aug_cfg, preset)
    steps_per_epoch = len(dataset) // cfg.batch_size
    if steps_per_epoch == 0:
        raise DataError(
            f"dataset of {len(dataset)} patches is smaller than one batch "
            f"({cfg.batch_size})"
        )
    total_steps = cfg.epochs * steps_per_epoch

    epoch_losses: list[float] = []
    start_epoch = 0
    latest = _latest_checkpoint(ckpt_dir)
    if resume and latest is not None:
        epoch_losses = load_checkpoint(latest, state)
        start_epoch = state.epoch + 1
        _truncate_metrics(run_dir / "metrics.log", state.step)
        log.info("resumed from %s at epoch %d", latest.name, start_epoch)
    else:
        warmup_banks(state, dataset)

    state.pair.train()
    metrics_path = run_dir / "metrics.log"
    with metrics_path.open("a") as metrics:
        for epoch in range(start_epoch, cfg.epochs):
            state.epoch = epoch
            loss_sum = 0.0
            count = 0
            for batch in make_batches(dataset, cfg.batch_size, state.rng, drop_last=True):
                lr = cosine_lr(state.step, total_steps, cfg.base_lr, cfg.min_lr)
                for group in state.optimizer.param_groups:
                    group["lr"] = lr
                report = train_step(batch, state)
                metrics.write(
                    f"{report.step}\t{epoch}\t{lr:.6e}\t{report.l_d:.6e}\t"
                    f"{report.l_s:.6e}\t{report.l_l:.6e}\t{report.total:.6e}\n"
                )
                loss_sum += report.total
                count += 1
                if log_every and report.step % log_every == 0:
                    log.info(
                        "step %d epoch %d lr %.4g loss %.4f",
                        report.step, epoch, lr, report.total,
                    )
            metrics.flush()
            epoch_losses.append(loss_sum / count)
            save_checkpoint(
                ckpt_dir / f"ckpt_epoch{epoch:04d}.pt", state, epoch_losses
            )
            log.info("epoch %d mean loss %.4f", epoch, epoch_losses[-1])

    best_epoch = int(np.argmin(epoch_losses))
    best_path = ckpt_dir / f"ckpt_epoch{best_epoch:04d}.pt"
    (run_dir / "best.json").write_text(
        json.dumps(
            {
                "epoch": best_epoch,
                "mean_loss": epoch_losses[best_epoch],
                "checkpoint": best_path.name,
            },
            indent=2,
        )
        + "\n"
    )
    log.info("best epoch %d (mean loss %.4f)", best_epoch, epoch_losses[best_epoch])
    return best_path
