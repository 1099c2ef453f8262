"""Loss terms and their weighted combination.

Three terms: an InfoNCE over deep global projections (``info_nce``), the
same form over shallow global projections (``cc_loss``), and a mean
squared distance between normalized local box embeddings (``di_loss``).
``combine`` applies the configured weights and guards against non-finite
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, DivergenceError, NotReadyError


@dataclass(frozen=True)
class LossConfig:
    """Weights and switches for the combined objective.

    ``alpha`` splits the two InfoNCE terms (deep gets ``alpha``); when
    the shallow term is disabled the deep term gets weight 1. ``beta``
    scales the local term. ``symmetric`` runs both view orderings per
    step and averages.
    """

    tau: float = 0.2
    alpha: float = 0.8
    beta: float = 10.0
    enable_di: bool = True
    enable_cc: bool = True
    symmetric: bool = False

    def validate(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class LossReport:
    """Per-step loss record, as plain floats."""

    step: int
    l_d: float
    l_s: float
    l_l: float
    total: float


def info_nce(
    query: torch.Tensor,
    key: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """Contrastive loss of a query against one positive key and a bank
    of negatives, averaged over the batch.

    ``query`` and ``key`` are unit-norm ``(D,)`` or ``(N, D)``;
    ``negatives`` is ``(M, D)``. Logits are all scaled by ``tau`` and
    reduced with a max-shifted log-sum-exp, so the result is stable for
    arbitrary magnitudes. Gradients flow through ``query`` only.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    if negatives is None or negatives.ndim != 2 or negatives.shape[0] == 0:
        raise NotReadyError("no negatives available")
    if query.ndim == 1:
        query = query.unsqueeze(0)
        key = key.unsqueeze(0)
    pos = (query * key.detach()).sum(dim=1, keepdim=True)
    neg = query @ negatives.detach().t()
    logits = torch.cat((pos, neg), dim=1) / tau
    shift = logits.max(dim=1, keepdim=True).values.detach()
    logsumexp = (logits - shift).exp().sum(dim=1).log() + shift.squeeze(1)
    return (logsumexp - logits[:, 0]).mean()


def di_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between row-normalized embeddings.

    ``pred`` and ``target`` are ``(K, D)`` (or any ``(..., D)``); rows
    are normalized to unit length first, so each pair contributes
    ``2 - 2 cos`` and the result lies in [0, 4]. Gradients flow through
    ``pred`` only.
    """
    p = F.normalize(pred, dim=-1, eps=1e-12)
    t = F.normalize(target.detach(), dim=-1, eps=1e-12)
    return ((p - t) ** 2).sum(dim=-1).mean()


def cc_loss(
    query: torch.Tensor,
    key: torch.Tensor,
    negatives: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    """InfoNCE over shallow global projections; same form as the deep
    term but fed from the shallow bank."""
    return info_nce(query, key, negatives, tau)


def _as_float(value) -> float:
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


def combine(
    l_d,
    l_s,
    l_l,
    cfg: LossConfig,
    step: int = 0,
):
    """Weighted total of the three terms under ``cfg``.

    Disabled terms contribute nothing regardless of the passed value;
    with the shallow term off the deep weight becomes 1, so the objective
    reduces to ``l_d + beta * l_l`` (and to plain ``l_d`` with both extras
    off). Tensors stay tensors (gradient-carrying); raises
    ``DivergenceError`` if any enabled input is non-finite.
    """
    cfg.validate()
    deep_w = cfg.alpha if cfg.enable_cc else 1.0
    parts = [(deep_w, l_d)]
    if cfg.enable_cc:
        parts.append((1.0 - cfg.alpha, l_s))
    if cfg.enable_di:
        parts.append((cfg.beta, l_l))
    for _, value in parts:
        if not math.isfinite(_as_float(value)):
            raise DivergenceError(f"non-finite loss term at step {step}")
    total = None
    for weight, value in parts:
        term = weight * value
        total = term if total is None else total + term
    return total
