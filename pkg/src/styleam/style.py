"""Feature style extraction, mixing and AdaIN transfer.

A feature style is the pair (channel-wise spatial mean, channel-wise spatial
standard deviation) of a feature map. Note that the standard deviation is
sometimes called "variance" in the literature; the square root is taken here.
"""

from typing import NamedTuple

import numpy as np
import torch

from .errors import ConfigError, InputError, InputShapeError

EPS = 1e-6


class Style(NamedTuple):
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C)


def extract_style(feat: torch.Tensor, eps: float = EPS) -> Style:
    if feat.dim() != 4:
        raise InputShapeError(f"expected a (B, C, H, W) feature map, got shape {tuple(feat.shape)}")
    if feat.shape[2] * feat.shape[3] < 1:
        raise InputShapeError("feature map has empty spatial extent")
    mean = feat.mean(dim=(2, 3))
    var = feat.var(dim=(2, 3), unbiased=False)
    return Style(mean, (var + eps).sqrt())


def concat_style(mean: torch.Tensor, std: torch.Tensor) -> torch.Tensor:
    if mean.shape != std.shape:
        raise InputShapeError(f"mean {tuple(mean.shape)} and std {tuple(std.shape)} differ in shape")
    return torch.cat([mean, std], dim=-1)


def split_style(f: torch.Tensor) -> Style:
    if f.shape[-1] % 2:
        raise InputShapeError(f"style vector length {f.shape[-1]} is odd")
    c = f.shape[-1] // 2
    return Style(f[..., :c], f[..., c:])


def mixed_style_concat(mixed: Style, target: Style) -> tuple[torch.Tensor, torch.Tensor]:
    return concat_style(*mixed), concat_style(*target)


def sample_mix(alpha: float, batch_size: int, rng: np.random.Generator, per_sample: bool = True) -> np.ndarray:
    """Draw mixing weights from Beta(alpha, alpha).

    With ``per_sample=False`` a single draw is repeated over the batch.
    """
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if per_sample:
        return rng.beta(alpha, alpha, size=batch_size)
    return np.full(batch_size, rng.beta(alpha, alpha))


def _as_weight(lam, like: torch.Tensor) -> torch.Tensor:
    lam = torch.as_tensor(lam, dtype=like.dtype, device=like.device)
    if torch.any((lam < 0) | (lam > 1)):
        raise InputError(f"mixing weight outside [0, 1]: {lam}")
    return lam


def _broadcast(lam: torch.Tensor, ndim: int) -> torch.Tensor:
    # per-sample weights are (B,); lift them over the trailing axes
    if lam.dim() == 0:
        return lam
    return lam.reshape(lam.shape + (1,) * (ndim - lam.dim()))


def mix_styles_and_labels(
    style_a: Style, style_b: Style, y_a: torch.Tensor, y_b: torch.Tensor, lam
) -> tuple[Style, torch.Tensor]:
    """Convex combination of two styles and their quality labels with the same weight.

    ``lam`` is a scalar or a per-sample vector of shape (B,).
    """
    if style_a.mean.shape != style_b.mean.shape or style_a.std.shape != style_b.std.shape:
        raise InputShapeError("styles to mix have different shapes")
    lam = _as_weight(lam, style_a.mean)
    w = _broadcast(lam, style_a.mean.dim())
    mean = w * style_a.mean + (1 - w) * style_b.mean
    std = w * style_a.std + (1 - w) * style_b.std
    y_a = torch.as_tensor(y_a, dtype=style_a.mean.dtype)
    y_b = torch.as_tensor(y_b, dtype=style_a.mean.dtype)
    y = _broadcast(lam, y_a.dim()) * y_a + (1 - _broadcast(lam, y_a.dim())) * y_b
    return Style(mean, std), y


def adain_transfer(feat: torch.Tensor, target: Style, eps: float = EPS) -> torch.Tensor:
    """Re-normalize ``feat`` so that each channel carries the target mean and std."""
    src = extract_style(feat, eps)
    if target.mean.shape != src.mean.shape or target.std.shape != src.std.shape:
        raise InputShapeError(
            f"target style {tuple(target.mean.shape)} does not match feature channels {tuple(src.mean.shape)}"
        )
    normed = (feat - src.mean[..., None, None]) / src.std[..., None, None]
    return normed * target.std[..., None, None] + target.mean[..., None, None]


def feature_mixup(feat_a: torch.Tensor, feat_b: torch.Tensor, y_a, y_b, lam) -> tuple[torch.Tensor, torch.Tensor]:
    if feat_a.shape != feat_b.shape:
        raise InputShapeError(f"feature shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    lam = _as_weight(lam, feat_a)
    w = lam if lam.dim() == 0 else _broadcast(lam, feat_a.dim())
    mixed = w * feat_a + (1 - w) * feat_b
    y_a = torch.as_tensor(y_a, dtype=feat_a.dtype)
    y_b = torch.as_tensor(y_b, dtype=feat_a.dtype)
    wy = _broadcast(lam, y_a.dim())
    return mixed, wy * y_a + (1 - wy) * y_b
