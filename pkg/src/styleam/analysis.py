"""Per-stage style export and style-vs-quality correlation summary."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .config import TrainingConfig
from .data import MOS, ImageSet, Normalizer, load_manifest
from .errors import ConfigError
from .style import extract_style
from .trainer import _normalizer, load_model, read_eval_scores


def mean_abs_spearman(stats: np.ndarray, quality: np.ndarray) -> float:
    """Mean over columns of |Spearman(stats[:, j], quality)|, skipping constant columns.

    Returns nan when every column is constant.
    """
    stats = np.asarray(stats, dtype=np.float64)
    q = rankdata(quality)
    q = q - q.mean()
    r = np.apply_along_axis(rankdata, 0, stats)
    r = r - r.mean(axis=0)
    denom = np.sqrt((r**2).sum(axis=0) * (q**2).sum())
    ok = denom > 0
    if not ok.any():
        return float("nan")
    rho = (r[:, ok] * q[:, None]).sum(axis=0) / denom[ok]
    return float(np.mean(np.abs(rho)))


@torch.no_grad()
def collect_stage_features(model, images: ImageSet, stages, crop, norm: Normalizer, batch_size=64):
    """{stage: (means (N,C), stds (N,C), flattened activations (N, C*H*W))} under test-mode preprocessing."""
    model.eval()
    out = {s: ([], [], []) for s in stages}
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(images.batch(range(i, min(i + batch_size, len(images))), "test", crop, None, norm))
        feats = model.backbone.forward_all(x.float())
        for s in stages:
            f = feats[s - 1]
            st = extract_style(f)
            out[s][0].append(st.mean.double().numpy())
            out[s][1].append(st.std.double().numpy())
            out[s][2].append(f.flatten(1).double().numpy())
    return {s: tuple(np.concatenate(parts) for parts in v) for s, v in out.items()}


def write_style_csv(path, names, domain, quality, means, stds):
    c = means.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "domain", "quality"] + [f"mean_{i}" for i in range(c)] + [f"std_{i}" for i in range(c)])
        for k, name in enumerate(names):
            w.writerow([name, domain, repr(float(quality[k]))] + [repr(float(v)) for v in means[k]] + [repr(float(v)) for v in stds[k]])


def analyze_styles(
    checkpoint,
    manifest,
    scores,
    stages=None,
    out_dir="analysis",
    domain="source",
    score_convention=MOS,
    score_range=(0.0, 5.0),
) -> dict:
    """Export per-stage style vectors and summarize how strongly they track quality.

    Writes ``stage_{s}.csv`` for each stage and ``summary.json``; returns the summary.
    """
    model, ckpt = load_model(checkpoint)
    config = TrainingConfig.from_dict(ckpt.config) if ckpt.config else TrainingConfig(mode=ckpt.mode)
    n_stages = model.backbone.num_stages
    stages = list(range(1, n_stages + 1)) if not stages else [int(s) for s in stages]
    bad = [s for s in stages if not 1 <= s <= n_stages]
    if bad:
        raise ConfigError(f"stages: must lie in 1..{n_stages}, got {bad}")

    man = load_manifest(manifest, score_convention, score_range)
    quality = read_eval_scores(scores, man, score_convention, score_range)
    images = ImageSet.from_manifest(man, with_scores=False)
    feats = collect_stage_features(model, images, stages, config.crop, _normalizer(config))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"checkpoint": str(checkpoint), "n": len(images), "domain": domain, "stages": {}}
    for s in stages:
        means, stds, flat = feats[s]
        write_style_csv(out / f"stage_{s}.csv", images.names, domain, quality, means, stds)
        summary["stages"][str(s)] = {
            "channels": int(means.shape[1]),
            "mean_abs_spearman_mean": mean_abs_spearman(means, quality),
            "mean_abs_spearman_std": mean_abs_spearman(stds, quality),
            "mean_abs_spearman_feature": mean_abs_spearman(flat, quality),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def style_correlation(stage_summary: dict) -> float:
    """Single number per stage: average of the mean and std correlations."""
    return 0.5 * (stage_summary["mean_abs_spearman_mean"] + stage_summary["mean_abs_spearman_std"])
