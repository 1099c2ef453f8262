"""Acceptance gate: ten numbered end-to-end checks.

Each test prints one ``[acceptance] criterion NN ...: PASS/FAIL`` line
(bypassing capture) before asserting, so a plain ``pytest -v`` run shows
the verdict per criterion even when a later assertion fails. Criteria 8
and 9 train real models and dominate the runtime; everything else
finishes in seconds.
"""

import copy
import math
import time
from dataclasses import replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from di3cl.datapipe import SynthConfig, make_batches, synth_patches, synth_scene
from di3cl.downstream import (
    FinetuneConfig,
    attach_seg_head,
    compute_metrics,
    confusion_matrix,
    finetune,
    poly_lr,
)
from di3cl.encoder import Backbone, NetworkPair, ema_update, get_preset
from di3cl.geometry import (
    AugmentConfig,
    Box,
    intersection_region,
    map_box_from_view,
    map_box_to_view,
    roi_align_1x1_batch,
    sample_boxes,
    sample_view_params,
)
from di3cl.losses import LossConfig, cc_loss, combine, di_loss, info_nce
from di3cl.memorybank import MemoryBank
from di3cl.pretrain import PretrainConfig, cosine_lr, make_state, train_step, warmup_banks
from di3cl.scene_inference import infer_scene, plan_tiles, stitch, tile_probabilities

TINY = get_preset("tiny")

# Desk-scale transfer study knobs (criterion 8). Sized for a small CPU
# box; the orderings, not the absolute scores, are the gate. The labeled
# stage trains the decoder on a frozen trunk so the comparison reads out
# representation quality instead of how fast a full network can relearn
# the task from 200 labels, and the moderate crop floor keeps view
# overlaps large enough that box correspondences carry signal at this
# patch size.
DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_SYNTH = SynthConfig(scene_size=256, n_classes=6, region_count=12, speckle_looks=1.0)
DESK_AUG = AugmentConfig(scale_min=0.4)
DESK_PRETRAIN = PretrainConfig(
    epochs=20,
    batch_size=32,
    base_lr=0.03,
    k_boxes=4,
    min_side=16.0,
    bank_capacity=512,
)
DESK_FINETUNE = FinetuneConfig(
    num_classes=6,
    epochs=4,
    batch_size=16,
    base_lr=0.05,
    patience=4,
    augment=False,
    freeze_backbone=True,
    decoder_width=64,
)


def _report(capsys, num: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"[acceptance] criterion {num:02d} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f" ({detail})"
    with capsys.disabled():
        print("\n" + line, flush=True)


# ---------------------------------------------------------------- 1


def test_criterion_01_loss_oracles(capsys):
    e1 = torch.zeros(1, 8, dtype=torch.float64)
    e1[0, 0] = 1.0
    e2 = torch.zeros(1, 8, dtype=torch.float64)
    e2[0, 1] = 1.0
    nce = float(info_nce(e1, e1, e2, tau=1.0))
    expected = -math.log(math.e / (math.e + 1.0))
    nce_ok = abs(nce - expected) < 1e-6

    aligned = float(di_loss(e1, e1))
    orthogonal = float(di_loss(e1, e2))
    antipodal = float(di_loss(e1, -e1))
    di_ok = aligned == 0.0 and orthogonal == 2.0 and antipodal == 4.0

    total = float(combine(1.0, 1.0, 0.1, LossConfig(alpha=0.8, beta=10.0)))
    combine_ok = total == 2.0

    ok = nce_ok and di_ok and combine_ok
    _report(
        capsys, 1, "loss oracles", ok,
        f"info_nce {nce:.8f} vs {expected:.8f}, di {aligned}/{orthogonal}/"
        f"{antipodal}, combine {total}",
    )
    assert nce_ok and di_ok and combine_ok


# ---------------------------------------------------------------- 2


class _MicroStack(nn.Module):
    """Two tiny conv taps plus projection heads; 486 trainable params
    together with the predictor, all double precision. Smooth (tanh)
    activations keep finite differences clean."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 4, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(4, 6, 3, stride=2, padding=1)
        self.proj_shallow = nn.Linear(4, 8)
        self.proj_deep = nn.Linear(6, 8)
        self.proj_local = nn.Linear(6, 8)

    def taps(self, x):
        shallow = torch.tanh(self.conv1(x))
        deep = torch.tanh(self.conv2(shallow))
        return shallow, deep


def test_criterion_02_gradient_check(capsys):
    started = time.time()
    torch.manual_seed(42)
    online = _MicroStack().double()
    predictor = nn.Linear(8, 8).double()
    target = copy.deepcopy(online)
    for p in target.parameters():
        p.requires_grad_(False)

    x1 = torch.randn(2, 1, 16, 16, dtype=torch.float64)
    x2 = torch.randn(2, 1, 16, 16, dtype=torch.float64)
    boxes_q = torch.tensor(
        [[[0.4, 0.5, 2.2, 1.8], [1.1, 0.9, 2.0, 2.4]],
         [[0.2, 0.3, 1.6, 2.0], [1.4, 1.2, 1.9, 1.7]]],
        dtype=torch.float64,
    )
    boxes_k = boxes_q.flip(1)
    neg_deep = F.normalize(torch.randn(5, 8, dtype=torch.float64), dim=1)
    neg_shallow = F.normalize(torch.randn(5, 8, dtype=torch.float64), dim=1)
    loss_cfg = LossConfig()

    def loss_fn() -> torch.Tensor:
        s_q, d_q = online.taps(x1)
        with torch.no_grad():
            s_k, d_k = target.taps(x2)
            key_deep = F.normalize(target.proj_deep(d_k.mean((-2, -1))), dim=1)
            key_shallow = F.normalize(target.proj_shallow(s_k.mean((-2, -1))), dim=1)
            pooled_k = roi_align_1x1_batch(d_k, boxes_k)
            key_local = F.normalize(
                target.proj_local(pooled_k.reshape(-1, 6)), dim=1
            )
        q_deep = F.normalize(online.proj_deep(d_q.mean((-2, -1))), dim=1)
        q_shallow = F.normalize(online.proj_shallow(s_q.mean((-2, -1))), dim=1)
        l_d = info_nce(q_deep, key_deep, neg_deep, loss_cfg.tau)
        l_s = cc_loss(q_shallow, key_shallow, neg_shallow, loss_cfg.tau)
        pooled_q = roi_align_1x1_batch(d_q, boxes_q)
        pred = predictor(F.normalize(online.proj_local(pooled_q.reshape(-1, 6)), dim=1))
        l_l = di_loss(pred, key_local)
        return combine(l_d, l_s, l_l, loss_cfg)

    params = list(online.parameters()) + list(predictor.parameters())
    n_params = sum(p.numel() for p in params)
    assert n_params <= 1000

    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    g = torch.cat([t.reshape(-1) for t in grads])
    theta0 = parameters_to_vector(params).detach().clone()

    eps = 1e-6
    worst = 0.0
    gen = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for _ in range(50):
            v = torch.randn(n_params, generator=gen, dtype=torch.float64)
            v /= v.norm()
            vector_to_parameters(theta0 + eps * v, params)
            f_plus = float(loss_fn())
            vector_to_parameters(theta0 - eps * v, params)
            f_minus = float(loss_fn())
            fd = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(g @ v)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-12)
            worst = max(worst, rel)
        vector_to_parameters(theta0, params)

    ok = worst < 1e-4
    _report(
        capsys, 2, "gradient check", ok,
        f"{n_params} params, worst rel err {worst:.2e} over 50 directions, "
        f"{time.time() - started:.1f}s",
    )
    assert ok


# ---------------------------------------------------------------- 3


def test_criterion_03_geometry(capsys):
    started = time.time()
    rng = np.random.default_rng(3)
    aug = AugmentConfig(output_size=64)

    worst_rt = 0.0
    for _ in range(10_000):
        h = int(rng.integers(48, 220))
        w = int(rng.integers(48, 220))
        vp = sample_view_params(rng, aug, (h, w))
        cx, cy, cw, ch = vp.crop_rect
        bw = float(rng.uniform(0.5, cw))
        bh = float(rng.uniform(0.5, ch))
        box = Box(
            x=float(cx + rng.uniform(0, cw - bw)),
            y=float(cy + rng.uniform(0, ch - bh)),
            w=bw,
            h=bh,
        )
        back = map_box_from_view(map_box_to_view(box, vp), vp)
        worst_rt = max(
            worst_rt,
            *(abs(a - b) for a, b in zip(box.as_tuple(), back.as_tuple())),
        )
    rt_ok = worst_rt < 1e-4

    view_bounds = Box(0.0, 0.0, 64.0, 64.0)
    contained = 0
    checked = 0
    while checked < 300:
        h = int(rng.integers(64, 200))
        w = int(rng.integers(64, 200))
        p1 = sample_view_params(rng, aug, (h, w))
        p2 = sample_view_params(rng, aug, (h, w))
        region = intersection_region(p1, p2, min_side=16.0)
        if region is None:
            continue
        checked += 1
        for box in sample_boxes(region, 4, 8.0, rng):
            for vp in (p1, p2):
                if view_bounds.contains(map_box_to_view(box, vp), tol=1e-6):
                    contained += 1
    containment_ok = contained == 300 * 4 * 2

    const = torch.full((2, 3, 8, 8), 0.7, dtype=torch.float64)
    ramp = torch.empty(2, 3, 8, 8, dtype=torch.float64)
    coeffs = [(0.5, -0.25, 1.0), (-1.5, 2.0, 0.3), (3.0, 0.75, -2.0)]
    ys, xs = torch.meshgrid(
        torch.arange(8, dtype=torch.float64),
        torch.arange(8, dtype=torch.float64),
        indexing="ij",
    )
    for c, (a, b, d) in enumerate(coeffs):
        ramp[:, c] = a * xs + b * ys + d
    boxes = torch.empty(2, 100, 4, dtype=torch.float64)
    for n in range(2):
        for k in range(100):
            bw = rng.uniform(1.0, 5.0)
            bh = rng.uniform(1.0, 5.0)
            boxes[n, k] = torch.tensor(
                [rng.uniform(0.6, 7.4 - bw), rng.uniform(0.6, 7.4 - bh), bw, bh]
            )
    out_const = roi_align_1x1_batch(const, boxes)
    const_err = float((out_const - 0.7).abs().max())
    out_ramp = roi_align_1x1_batch(ramp, boxes)
    centers_x = boxes[..., 0] + boxes[..., 2] / 2
    centers_y = boxes[..., 1] + boxes[..., 3] / 2
    ramp_err = 0.0
    for c, (a, b, d) in enumerate(coeffs):
        expect = a * (centers_x - 0.5) + b * (centers_y - 0.5) + d
        ramp_err = max(ramp_err, float((out_ramp[..., c] - expect).abs().max()))
    roi_ok = const_err < 1e-6 and ramp_err < 1e-6

    ok = rt_ok and containment_ok and roi_ok
    _report(
        capsys, 3, "geometry", ok,
        f"roundtrip max {worst_rt:.2e}, containment {contained}/2400, "
        f"roi const {const_err:.2e} ramp {ramp_err:.2e}, "
        f"{time.time() - started:.1f}s",
    )
    assert rt_ok and containment_ok and roi_ok


# ---------------------------------------------------------------- 4


def test_criterion_04_ema_closed_form(capsys):
    torch.manual_seed(4)
    pair = NetworkPair(TINY.encoder).double()
    momentum = 0.99
    gen = torch.Generator().manual_seed(5)
    with torch.no_grad():
        for p in pair.online.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64))
    xi0 = [p.detach().clone() for p in pair.target.parameters()]
    theta = [p.detach().clone() for p in pair.online.parameters()]

    worst = 0.0
    steps_done = 0
    for t in (1, 10, 100):
        for _ in range(t - steps_done):
            ema_update(pair, momentum)
        steps_done = t
        decay = momentum**t
        for p, x0, th in zip(pair.target.parameters(), xi0, theta):
            expect = decay * x0 + (1.0 - decay) * th
            worst = max(worst, float((p - expect).abs().max()))
    ok = worst < 1e-5
    _report(capsys, 4, "ema closed form", ok, f"max deviation {worst:.2e} at t in 1/10/100")
    assert ok


# ---------------------------------------------------------------- 5


def test_criterion_05_memory_bank_oracle(capsys):
    rng = np.random.default_rng(55)
    mismatches = 0
    for _ in range(1000):
        cap = int(rng.integers(1, 17))
        dim = int(rng.integers(1, 5))
        bank = MemoryBank(cap, dim)
        naive: list[np.ndarray] = []
        for _ in range(int(rng.integers(1, 8))):
            n = int(rng.integers(1, cap + 1))
            rows = rng.normal(size=(n, dim))
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            rows = rows.astype(np.float32)
            bank.enqueue(torch.from_numpy(rows))
            naive.extend(rows)
            naive = naive[-cap:]
            if not np.array_equal(bank.negatives().numpy(), np.stack(naive)):
                mismatches += 1
    oracle_ok = mismatches == 0

    deep = MemoryBank(4, 3)
    shallow = MemoryBank(4, 3)
    rows_a = F.normalize(torch.randn(4, 3), dim=1)
    rows_b = F.normalize(torch.randn(4, 3), dim=1)
    deep.enqueue(rows_a)
    shallow.enqueue(rows_b)
    before = shallow.negatives().clone()
    deep.enqueue(F.normalize(torch.randn(2, 3), dim=1))
    isolation_ok = torch.equal(shallow.negatives(), before) and not torch.equal(
        deep.negatives(), shallow.negatives()
    )

    ok = oracle_ok and isolation_ok
    _report(
        capsys, 5, "memory bank", ok,
        f"{mismatches} mismatches in 1000 sequences, isolation {isolation_ok}",
    )
    assert oracle_ok and isolation_ok


# ---------------------------------------------------------------- 6


def test_criterion_06_metrics_brute_force(capsys):
    rng = np.random.default_rng(6)
    exact = True
    for trial in range(100):
        gt = rng.integers(0, 3, size=(16, 16))
        pred = rng.integers(0, 3, size=(16, 16))
        if trial % 2:
            gt[rng.random((16, 16)) < 0.1] = 255
        brute = np.zeros((3, 3), dtype=np.int64)
        for y in range(16):
            for x in range(16):
                if gt[y, x] != 255:
                    brute[gt[y, x], pred[y, x]] += 1
        cm = confusion_matrix(pred, gt, 3)
        if not np.array_equal(cm, brute):
            exact = False
            break
        report = compute_metrics(cm)
        if abs(report.oa - np.trace(brute) / brute.sum()) > 1e-12:
            exact = False
            break

    worked = compute_metrics(np.array([[40, 10], [20, 30]]))
    worked_ok = (
        abs(worked.oa - 0.70) < 1e-12
        and abs(worked.kappa - 0.40) < 1e-12
        and abs(worked.miou - 0.5357) < 1e-4
        and abs(worked.miou - 15.0 / 28.0) < 1e-12
    )

    ok = exact and worked_ok
    _report(
        capsys, 6, "metrics", ok,
        f"100 random pairs exact {exact}; worked OA {worked.oa:.2f} "
        f"kappa {worked.kappa:.2f} mIoU {worked.miou:.4f}",
    )
    assert exact and worked_ok


# ---------------------------------------------------------------- 7


def test_criterion_07_stitching(capsys):
    started = time.time()
    torch.manual_seed(7)
    model = attach_seg_head(Backbone(TINY.encoder.backbone), num_classes=2, width=32)
    model.eval()
    scene, _ = synth_scene(
        SynthConfig(scene_size=2048, region_count=48, speckle_looks=4.0, seed=77)
    )
    window, stride = 512, 250

    streamed = infer_scene(model, scene, window, stride)

    plan = plan_tiles(scene.shape, window, stride)
    tiles = [
        tile_probabilities(model, scene[r : r + window, c : c + window])
        for r, c in plan.offsets
    ]
    reference = stitch(tiles, plan)
    exact_ok = streamed.shape == (2048, 2048) and np.array_equal(streamed, reference)

    rng = np.random.default_rng(7)
    permutation_ok = True
    for _ in range(10):
        order = rng.permutation(len(tiles))
        shuffled = [(int(i), tiles[i]) for i in order]
        if not np.array_equal(stitch(shuffled, plan), reference):
            permutation_ok = False
            break

    ok = exact_ok and permutation_ok
    _report(
        capsys, 7, "scene stitching", ok,
        f"{len(plan)} tiles, streaming==reference {exact_ok}, "
        f"10 shuffles invariant {permutation_ok}, {time.time() - started:.0f}s",
    )
    assert exact_ok and permutation_ok


# ---------------------------------------------------------------- 8


def _desk_synth(seed: int) -> SynthConfig:
    return replace(DESK_SYNTH, seed=seed)


def _pretrain_backbone(patches, loss_cfg: LossConfig, seed: int) -> Backbone:
    cfg = replace(DESK_PRETRAIN, seed=seed)
    state = make_state(cfg, loss_cfg, DESK_AUG, TINY)
    warmup_banks(state, patches)
    state.pair.train()
    steps_per_epoch = len(patches) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    for _ in range(cfg.epochs):
        for batch in make_batches(patches, cfg.batch_size, state.rng, drop_last=True):
            lr = cosine_lr(state.step, total_steps, cfg.base_lr, cfg.min_lr)
            for group in state.optimizer.param_groups:
                group["lr"] = lr
            train_step(batch, state)
    return state.pair.online.backbone


def _transfer_miou(backbone: Backbone, train, evalset, seed: int) -> float:
    cfg = replace(DESK_FINETUNE, seed=seed)
    return finetune(train, evalset, cfg, backbone).metrics.miou


def test_criterion_08_desk_scale_transfer(capsys):
    started = time.time()
    pre_patches = synth_patches(_desk_synth(100), 2000, 64, np.random.default_rng(100))
    train_set = synth_patches(
        _desk_synth(200), 200, 64, np.random.default_rng(200), with_masks=True
    )
    eval_set = synth_patches(
        _desk_synth(300), 400, 64, np.random.default_rng(300), with_masks=True
    )

    variants = {
        "baseline": LossConfig(enable_di=False, enable_cc=False),
        "di": LossConfig(enable_cc=False),
        "full": LossConfig(),
    }
    scores: dict[str, list[float]] = {name: [] for name in ("random", *variants)}
    for seed in DESK_SEEDS:
        torch.manual_seed(1000 + seed)
        random_backbone = Backbone(TINY.encoder.backbone)
        scores["random"].append(
            _transfer_miou(random_backbone, train_set, eval_set, seed)
        )
        for name, loss_cfg in variants.items():
            backbone = _pretrain_backbone(pre_patches, loss_cfg, seed)
            scores[name].append(
                _transfer_miou(backbone, train_set, eval_set, seed)
            )

    means = {name: float(np.mean(vals)) for name, vals in scores.items()}
    pretrained_beats_random = all(
        means[name] - means["random"] >= 0.02 for name in variants
    )
    di_at_least_baseline = means["di"] >= means["baseline"]
    full_beats_baseline = means["full"] - means["baseline"] >= 0.01

    ok = pretrained_beats_random and di_at_least_baseline and full_beats_baseline
    detail = (
        f"mean mIoU random {means['random']:.4f} baseline {means['baseline']:.4f} "
        f"di {means['di']:.4f} full {means['full']:.4f}; "
        f"(a) {pretrained_beats_random} (b) {di_at_least_baseline} "
        f"(c) {full_beats_baseline}; {time.time() - started:.0f}s"
    )
    _report(capsys, 8, "desk-scale transfer", ok, detail)
    assert pretrained_beats_random, detail
    assert di_at_least_baseline, detail
    assert full_beats_baseline, detail


# ---------------------------------------------------------------- 9


def test_criterion_09_training_progress(capsys):
    started = time.time()
    patches = synth_patches(_desk_synth(500), 320, 64, np.random.default_rng(500))
    cfg_base = PretrainConfig(
        epochs=10,
        batch_size=16,
        base_lr=0.06,
        k_boxes=4,
        min_side=16.0,
        bank_capacity=256,
    )
    improved = 0
    pairs = []
    for seed in range(5):
        cfg = replace(cfg_base, seed=seed)
        state = make_state(cfg, LossConfig(), AugmentConfig(), TINY)
        warmup_banks(state, patches)
        state.pair.train()
        steps_per_epoch = len(patches) // cfg.batch_size
        total_steps = cfg.epochs * steps_per_epoch
        totals = []
        for _ in range(cfg.epochs):
            for batch in make_batches(patches, cfg.batch_size, state.rng, drop_last=True):
                lr = cosine_lr(state.step, total_steps, cfg.base_lr)
                for group in state.optimizer.param_groups:
                    group["lr"] = lr
                totals.append(train_step(batch, state).total)
        early = float(np.mean(totals[:20]))
        late = float(np.mean(totals[179:200]))
        pairs.append((early, late))
        if late < early:
            improved += 1
    ok = improved == 5
    summary = " ".join(f"{e:.2f}->{l:.2f}" for e, l in pairs)
    _report(
        capsys, 9, "training progress", ok,
        f"{improved}/5 seeds improved ({summary}), {time.time() - started:.0f}s",
    )
    assert ok


# ---------------------------------------------------------------- 10


def test_criterion_10_schedules(capsys):
    cos_ok = (
        cosine_lr(0, 100, 0.09) == 0.09
        and cosine_lr(100, 100, 0.09) == 0.0
        and cosine_lr(50, 100, 0.09) == 0.045
        and cosine_lr(50, 100, 0.09, min_lr=0.01) == 0.05
    )
    poly_mid = poly_lr(50, 100, 0.01)
    poly_ok = (
        poly_lr(0, 100, 0.01) == 0.01
        and poly_lr(100, 100, 0.01) == 0.0
        and abs(poly_mid - 0.01 * 0.5**0.9) < 1e-6
    )
    ok = cos_ok and poly_ok
    _report(
        capsys, 10, "lr schedules", ok,
        f"cosine endpoints/midpoint exact {cos_ok}, poly mid {poly_mid:.8f}",
    )
    assert cos_ok and poly_ok
