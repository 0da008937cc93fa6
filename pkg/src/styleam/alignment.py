"""Adversarial style-alignment losses and the SROCC-gated relaxation flag."""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError, UndefinedMetricError
from .metrics import srocc

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class LossReport:
    l_q: float
    l_d: float
    l_all: float
    mixed: bool
    h: int
    batch_srocc: float | None = None


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)


def _check_nonempty(d_source, d_target):
    if d_source.numel() == 0 or d_target.numel() == 0:
        raise InputError("discriminator loss needs at least one source and one target sample")


def discriminator_bce(d_source: torch.Tensor, d_target: torch.Tensor) -> torch.Tensor:
    """Source is labeled 0, target 1."""
    _check_nonempty(d_source, d_target)
    return -torch.log(1 - _clamp(d_source)).mean() - torch.log(_clamp(d_target)).mean()


def relaxed_discriminator_bce(d_source: torch.Tensor, d_target: torch.Tensor, h: int) -> torch.Tensor:
    """With ``h=1`` the source samples are labeled as target; ``h=0`` is plain BCE."""
    if h not in (0, 1):
        raise InputError(f"relaxation flag must be 0 or 1, got {h}")
    _check_nonempty(d_source, d_target)
    if h == 0:
        return discriminator_bce(d_source, d_target)
    # 1 - |d - 1| == d on (0, 1)
    src = 1 - (_clamp(d_source) - h).abs()
    return -torch.log(_clamp(src)).mean() - torch.log(_clamp(d_target)).mean()


def relaxation_flag(preds, labels, tau: float) -> tuple[int, float | None]:
    """Return ``(h, batch_srocc)``; h is 0 when the batch SROCC exceeds ``tau``.

    Degenerate batches (fewer than 3 samples or constant ranks) are relaxed.
    """
    preds = _to_numpy(preds)
    labels = _to_numpy(labels)
    if len(preds) < 3:
        log.warning("relaxation flag on a batch of %d < 3 samples; relaxing", len(preds))
        return 1, None
    try:
        rho = srocc(preds, labels)
    except UndefinedMetricError as exc:
        log.warning("batch SROCC undefined (%s); relaxing", exc)
        return 1, None
    return (0 if rho > tau else 1), rho


def quality_l2(preds: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over samples of the l2 norm of each (scalar) residual."""
    if preds.shape != labels.shape:
        raise InputError(f"preds {tuple(preds.shape)} and labels {tuple(labels.shape)} differ")
    if preds.numel() == 0:
        raise InputError("quality loss on an empty batch")
    return (preds - labels).abs().mean()


def total_loss(l_q, l_d, lambda_adv: float):
    if lambda_adv < 0:
        raise InputError(f"lambda_adv must be >= 0, got {lambda_adv}")
    return l_q + lambda_adv * l_d


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)
