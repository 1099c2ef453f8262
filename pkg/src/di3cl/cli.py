"""Command-line entry point.

Five modes: ``pretrain``, ``finetune``, ``evaluate``, ``infer-scene``,
``synth``. Each takes an optional ``--config FILE`` plus any number of
``--section.key value`` (or ``--section.key=value``) overrides; the file
is applied first, overrides win. The effective configuration is echoed
into the run directory so a run can be reproduced from its artifacts.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 training divergence, 5 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, effective_config_text, parse_config
from .datapipe import (
    load_seg_dir,
    save_image,
    save_mask,
    scan_dataset,
    synth_patches,
    synth_scene,
)
from .downstream import (
    confusion_matrix,
    compute_metrics,
    evaluate,
    finetune,
    load_seg_model,
    save_seg_model,
)
from .encoder import Backbone, get_preset
from .errors import ConfigError, DataError, DivergenceError
from .pretrain import load_pretrained_backbone, run_pretraining
from .scene_inference import infer_scene

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune", "evaluate", "infer-scene", "synth")
RUN_DIR_ENV = "DI3CL_RUN_DIR"


def _parse_overrides(extras: list[str]) -> list[tuple[str, str]]:
    """Turn leftover ``--section.key[=| ]value`` tokens into pairs."""
    pairs = []
    i = 0
    while i < len(extras):
        token = extras[i]
        if not (token.startswith("--") and "." in token):
            raise ConfigError(f"unrecognized argument {token!r}")
        body = token[2:]
        if "=" in body:
            dotted, value = body.split("=", 1)
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"override {token!r} is missing a value")
            dotted, value = body, extras[i + 1]
            i += 1
        pairs.append((dotted, value))
        i += 1
    return pairs


def _resolve_run_dir(arg: str | None, cfg: RunConfig, mode: str) -> Path:
    chosen = arg or cfg.run.dir or os.environ.get(RUN_DIR_ENV, "")
    if not chosen:
        chosen = str(Path("runs") / mode)
    return Path(chosen)


def _split_train_val(samples, fraction: float, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(len(samples) * fraction)))
    if n_val >= len(samples):
        raise DataError(
            f"cannot split {len(samples)} labeled samples into train and val"
        )
    val_idx = set(order[:n_val].tolist())
    train = [samples[i] for i in range(len(samples)) if i not in val_idx]
    val = [samples[i] for i in range(len(samples)) if i in val_idx]
    return train, val


def _labeled_sets(cfg: RunConfig):
    """Training and validation (image, mask) lists per the data section."""
    if cfg.data.root:
        train = load_seg_dir(cfg.data.root)
        if cfg.data.val_root:
            val = load_seg_dir(cfg.data.val_root)
        else:
            train, val = _split_train_val(
                train, cfg.data.val_fraction, np.random.default_rng(cfg.data.seed)
            )
        return train, val
    rng = np.random.default_rng(cfg.data.seed)
    synth_cfg = cfg.synth.to_synth_config()
    samples = synth_patches(
        synth_cfg,
        cfg.data.train_count + cfg.data.val_count,
        cfg.data.patch_size,
        rng,
        with_masks=True,
    )
    return samples[: cfg.data.train_count], samples[cfg.data.train_count :]


def _pretrain_dataset(cfg: RunConfig):
    if cfg.data.root:
        return scan_dataset(cfg.data.root)
    rng = np.random.default_rng(cfg.data.seed)
    return synth_patches(
        cfg.synth.to_synth_config(), cfg.data.synth_count, cfg.data.patch_size, rng
    )


def _cmd_pretrain(cfg: RunConfig, run_dir: Path) -> None:
    dataset = _pretrain_dataset(cfg)
    best = run_pretraining(
        dataset,
        run_dir,
        cfg.pretrain,
        loss_cfg=cfg.loss,
        aug_cfg=cfg.augment,
        preset=get_preset(cfg.run.preset),
        resume=cfg.run.resume,
        log_every=cfg.run.log_every,
    )
    print(f"best checkpoint: {best}")


def _make_backbone(cfg: RunConfig) -> Backbone:
    if cfg.run.init == "pretrained":
        if not cfg.run.checkpoint:
            raise ConfigError(
                "run.checkpoint is required when run.init = pretrained"
            )
        return load_pretrained_backbone(cfg.run.checkpoint)
    import torch

    torch.manual_seed(cfg.finetune.seed)
    return Backbone(get_preset(cfg.run.preset).encoder.backbone)


def _write_metrics(run_dir: Path, report) -> None:
    (run_dir / "metrics.txt").write_text(report.table() + "\n")
    lines = [f"{name}\t{value:.6f}" for name, value in report.records()]
    (run_dir / "metrics.tsv").write_text("\n".join(lines) + "\n")


def _cmd_finetune(cfg: RunConfig, run_dir: Path) -> None:
    train, val = _labeled_sets(cfg)
    backbone = _make_backbone(cfg)
    result = finetune(train, val, cfg.finetune, backbone)
    model_path = run_dir / "model.pt"
    save_seg_model(model_path, result.model)
    _write_metrics(run_dir, result.metrics)
    print(result.metrics.table())
    print(
        f"best epoch {result.best_epoch} of {result.epochs_run} run; "
        f"model written to {model_path}"
    )


def _load_model(cfg: RunConfig, run_dir: Path):
    path = cfg.run.model or str(run_dir / "model.pt")
    if not Path(path).is_file():
        raise DataError(
            f"no segmentation model at {path}; set run.model or run finetune first"
        )
    return load_seg_model(path)


def _cmd_evaluate(cfg: RunConfig, run_dir: Path) -> None:
    model = _load_model(cfg, run_dir)
    if cfg.data.val_root:
        samples = load_seg_dir(cfg.data.val_root)
    else:
        _, samples = _labeled_sets(cfg)
    report = evaluate(
        model, samples, model.num_classes, cfg.finetune.ignore_label
    )
    _write_metrics(run_dir, report)
    print(report.table())


def _cmd_infer_scene(cfg: RunConfig, run_dir: Path) -> None:
    model = _load_model(cfg, run_dir)
    mask = None
    if cfg.run.scene:
        scene = cfg.run.scene
    else:
        scene, mask = synth_scene(cfg.synth.to_synth_config())
        save_image(run_dir / f"{cfg.infer.stem}_input.png", scene, bits=16)
        save_mask(run_dir / f"{cfg.infer.stem}_gt.png", mask)
    labels = infer_scene(
        model,
        scene,
        cfg.infer.window,
        cfg.infer.stride,
        out_dir=run_dir,
        stem=cfg.infer.stem,
    )
    print(f"labels written under {run_dir} (prefix {cfg.infer.stem!r})")
    if mask is not None:
        n = max(model.num_classes, int(mask.max()) + 1)
        report = compute_metrics(confusion_matrix(labels, mask, n))
        print(report.table())


def _cmd_synth(cfg: RunConfig, run_dir: Path) -> None:
    images = run_dir / "images"
    masks = run_dir / "masks"
    images.mkdir(parents=True, exist_ok=True)
    masks.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.synth.scenes):
        image, mask = synth_scene(cfg.synth.to_synth_config(seed=cfg.synth.seed + i))
        save_image(images / f"scene_{i:04d}.png", image, bits=16)
        save_mask(masks / f"scene_{i:04d}.png", mask)
    print(f"wrote {cfg.synth.scenes} scene(s) under {run_dir}")


def dispatch(mode: str, cfg: RunConfig, run_dir: Path) -> None:
    handlers = {
        "pretrain": _cmd_pretrain,
        "finetune": _cmd_finetune,
        "evaluate": _cmd_evaluate,
        "infer-scene": _cmd_infer_scene,
        "synth": _cmd_synth,
    }
    if mode not in handlers:
        raise ConfigError(f"unknown mode {mode!r}")
    handlers[mode](cfg, run_dir)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="di3cl",
        description="Contrastive SAR pre-training, segmentation fine-tuning, "
        "and full-scene inference.",
    )
    parser.add_argument("--version", action="version", version=f"di3cl {__version__}")
    sub = parser.add_subparsers(dest="mode", required=True, metavar="MODE")
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run {mode}")
        p.add_argument("--config", default=None, help="configuration file")
        p.add_argument("--run-dir", default=None, help="output directory")
    args, extras = parser.parse_known_args(argv)

    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    try:
        overrides = _parse_overrides(extras)
        cfg = parse_config(args.config, overrides)
        run_dir = _resolve_run_dir(args.run_dir, cfg, args.mode)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.effective").write_text(effective_config_text(cfg))
        dispatch(args.mode, cfg, run_dir)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
