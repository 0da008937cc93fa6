"""Source pretraining, adversarial style alignment with Style Mixup, evaluation.

All training randomness (batch order, crops, flips, the mixup gate, mixing
weights and partner permutations) comes from one ``numpy.random.Generator``
seeded from the config; torch's generator is only used for parameter init.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import style as S
from .alignment import LossReport, quality_l2, relaxation_flag, relaxed_discriminator_bce, total_loss
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    pack_training_state,
    restore_optimizer,
    restore_rng,
    save_checkpoint,
)
from .config import TrainingConfig
from .data import ImageSet, Normalizer, epoch_batches, load_manifest, paired_epoch
from .errors import ConfigError, UndefinedMetricError
from .metrics import MetricsReport, evaluate_predictions
from .nn import StyleAMNet, pool

log = logging.getLogger(__name__)

GRL_COEFF = 1.0


def build_model(config: TrainingConfig) -> StyleAMNet:
    torch.manual_seed(config.seed)
    model = StyleAMNet(config.mode, config.alignment_space)
    if config.backbone_weights:
        ckpt = load_checkpoint(config.backbone_weights)
        bb = {k[len("backbone.") :]: v for k, v in ckpt.model_state().items() if k.startswith("backbone.")}
        if not bb:
            raise ConfigError(f"backbone_weights: {config.backbone_weights} holds no backbone tensors")
        model.backbone.load_state_dict(bb)
    return model


def make_optimizer(model: torch.nn.Module, config: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay)


def load_model(path) -> tuple[StyleAMNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = StyleAMNet(ckpt.mode, ckpt.alignment_space)
    model.load_state_dict(ckpt.model_state())
    return model, ckpt


# --------------------------------------------------------------------------
# per-step computation


@dataclass
class SourceBranch:
    preds: torch.Tensor
    labels: torch.Tensor
    align: torch.Tensor | None  # what the discriminator sees for the source side
    mixed: bool


def _align_vector(feat: torch.Tensor, space: str, style: S.Style | None = None) -> torch.Tensor | None:
    if space == "style":
        return S.concat_style(*(style if style is not None else S.extract_style(feat)))
    if space == "feature":
        return pool(feat)
    return None


def source_branch(model: StyleAMNet, feat: torch.Tensor, y: torch.Tensor, config: TrainingConfig, rng, space: str):
    """Quality predictions and discriminator input for the source half of a step.

    Draws ``p ~ U[0, 1]`` and takes the mixed branch when ``p > 1 - mixup_prob``.
    """
    p = rng.random()
    mixed = config.mixup_mode != "none" and p > 1 - config.mixup_prob
    if not mixed:
        return SourceBranch(model.predict_quality(feat), y, _align_vector(feat, space), False)

    b = feat.shape[0]
    lam = torch.as_tensor(S.sample_mix(config.alpha, b, rng, config.per_sample_lambda), dtype=feat.dtype)
    perm = torch.as_tensor(rng.permutation(b))
    if config.mixup_mode == "feature_mixup":
        fmix, ymix = S.feature_mixup(feat, feat[perm], y, y[perm], lam)
        return SourceBranch(model.predict_quality(fmix), ymix, _align_vector(fmix, space), True)

    st = S.extract_style(feat)
    mixed_style, ymix = S.mix_styles_and_labels(st, S.Style(st.mean[perm], st.std[perm]), y, y[perm], lam)
    if config.mixup_mode == "mixstyle_no_label":
        ymix = y
    fmix = S.adain_transfer(feat, mixed_style)
    return SourceBranch(model.predict_quality(fmix), ymix, _align_vector(fmix, space, mixed_style), True)


class RelaxationTracker:
    """Holds tau and, optionally, a running average of batch SROCC."""

    def __init__(self, tau: float, momentum: float | None = None):
        self.tau = tau
        self.momentum = momentum
        self.running = None

    def __call__(self, preds, labels) -> tuple[int, float | None]:
        h, rho = relaxation_flag(preds, labels, self.tau)
        if self.momentum is None or rho is None:
            return h, rho
        self.running = rho if self.running is None else self.momentum * self.running + (1 - self.momentum) * rho
        return (0 if self.running > self.tau else 1), rho


def train_step_uda(
    model: StyleAMNet,
    optimizer: torch.optim.Optimizer,
    x_s: torch.Tensor,
    y_s: torch.Tensor,
    x_t: torch.Tensor,
    config: TrainingConfig,
    rng: np.random.Generator,
    tracker: RelaxationTracker | None = None,
) -> LossReport:
    tracker = tracker or RelaxationTracker(config.tau, config.srocc_momentum)
    model.train()
    optimizer.zero_grad(set_to_none=True)
    feats = model.backbone(torch.cat([x_s, x_t]))  # shared BN statistics across domains
    f_src, f_tgt = feats[: len(x_s)], feats[len(x_s) :]
    space = model.alignment_space
    br = source_branch(model, f_src, y_s, config, rng, space)
    l_q = quality_l2(br.preds, br.labels)

    h, rho = 1, None
    if config.relaxation:
        h, rho = tracker(br.preds, br.labels)
    else:
        h, rho = 0, _safe_srocc(br.preds, br.labels)

    if model.discriminator is None:
        l_d = torch.zeros((), dtype=l_q.dtype)
    else:
        # with zero weight the discriminator gets no gradient at all, so Adam's
        # weight decay leaves it untouched instead of shrinking it every step
        with torch.set_grad_enabled(config.lambda_adv > 0):
            d_s = model.discriminate(br.align, GRL_COEFF)
            d_t = model.discriminate(_align_vector(f_tgt, space), GRL_COEFF)
            l_d = relaxed_discriminator_bce(d_s, d_t, h)
    l_all = total_loss(l_q, l_d, config.lambda_adv)
    l_all.backward()
    optimizer.step()
    return LossReport(l_q.item(), l_d.item(), l_all.item(), br.mixed, int(h), rho)


def _safe_srocc(preds, labels):
    from .metrics import srocc

    try:
        return srocc(preds.detach().double().numpy(), labels.detach().double().numpy())
    except UndefinedMetricError:
        return None


def pretrain_step(model, optimizer, x_s, y_s, config, rng) -> LossReport:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    feat = model.backbone(x_s)
    br = source_branch(model, feat, y_s, config, rng, "none")
    l_q = quality_l2(br.preds, br.labels)
    l_q.backward()
    optimizer.step()
    return LossReport(l_q.item(), 0.0, l_q.item(), br.mixed, 0, _safe_srocc(br.preds, br.labels))


# --------------------------------------------------------------------------
# data plumbing


@dataclass
class Domains:
    source: ImageSet
    target: ImageSet


def load_domains(config: TrainingConfig) -> Domains:
    """Source images with labels, target images without.

    The target manifest's score column is discarded here; target labels only
    enter through :func:`evaluate_files`.
    """
    if not config.source_manifest or not config.target_manifest:
        raise ConfigError("source_manifest: both source_manifest and target_manifest are required for training")
    src = load_manifest(config.source_manifest, config.source_score_convention, config.source_score_range)
    if not src.labeled:
        raise ConfigError(f"source_manifest: {config.source_manifest} has records without scores")
    tgt = load_manifest(config.target_manifest, config.target_score_convention, config.target_score_range)
    return Domains(ImageSet.from_manifest(src, with_scores=True), ImageSet.from_manifest(tgt, with_scores=False))


def _tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


def _normalizer(config) -> Normalizer:
    return Normalizer(tuple(config.norm_mean), tuple(config.norm_std))


class Telemetry:
    def __init__(self, path: Path | None):
        self.path = path
        self.records = []
        self._fh = path.open("a", encoding="utf-8") if path is not None else None

    def write(self, rec: dict):
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _record(step, phase, epoch, rep: LossReport) -> dict:
    d = asdict(rep)
    return {"step": step, "phase": phase, "epoch": epoch, **d}


def pretrain_source(
    config: TrainingConfig,
    model: StyleAMNet,
    source: ImageSet,
    rng: np.random.Generator,
    telemetry: Telemetry | None = None,
) -> Checkpoint:
    if source.scores is None:
        raise ConfigError("source_manifest: pretraining needs a labeled source manifest")
    opt = make_optimizer(model, config)
    norm = _normalizer(config)
    telemetry = telemetry or Telemetry(None)
    step = 0
    for epoch in range(config.pretrain_epochs):
        for idx in epoch_batches(len(source), config.batch_size, rng):
            x = _tensor(source.batch(idx, "train", config.crop, rng, norm))
            y = _tensor(source.scores[idx])
            rep = pretrain_step(model, opt, x, y, config, rng)
            telemetry.write(_record(step, "pretrain", epoch, rep))
            step += 1
    return pack_training_state(
        model, opt, rng, epoch=config.pretrain_epochs, phase="pretrain", config=config.to_dict(), config_digest=config.digest()
    )


def uda_epoch(config, model, opt, domains: Domains, rng, tracker, telemetry, epoch, step0) -> int:
    norm = _normalizer(config)
    step = step0
    for s_idx, t_idx in paired_epoch(len(domains.source), len(domains.target), config.batch_size, rng):
        x_s = _tensor(domains.source.batch(s_idx, "train", config.crop, rng, norm))
        y_s = _tensor(domains.source.scores[s_idx])
        x_t = _tensor(domains.target.batch(t_idx, "train", config.crop, rng, norm))
        rep = train_step_uda(model, opt, x_s, y_s, x_t, config, rng, tracker)
        telemetry.write(_record(step, "uda", epoch, rep))
        step += 1
    return step


# --------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: StyleAMNet, images: ImageSet, config: TrainingConfig, batch_size: int = 64) -> np.ndarray:
    model.eval()
    norm = _normalizer(config)
    out = []
    for i in range(0, len(images), batch_size):
        idx = range(i, min(i + batch_size, len(images)))
        out.append(model(_tensor(images.batch(idx, "test", config.crop, None, norm))).double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def read_eval_scores(scores_path, images_manifest, convention, raw_range) -> np.ndarray:
    """Scores for ``images_manifest`` from a sibling ``path,score`` file, matched by row order.

    Raises ``ValueError`` on row-count or path mismatch.
    """
    scores = load_manifest(scores_path, convention, raw_range, check_files=False)
    if len(scores) != len(images_manifest):
        raise ValueError(f"{scores_path}: {len(scores)} score rows but {len(images_manifest)} images")
    for a, b in zip(scores.paths, images_manifest.paths):
        if Path(a).resolve() != Path(b).resolve():
            raise ValueError(f"{scores_path}: row for {a} does not match image {b}")
    return scores.rescaled_scores()


def evaluate_files(model, config, manifest_path, scores_path) -> tuple[MetricsReport, np.ndarray, list[str]]:
    man = load_manifest(manifest_path, config.target_score_convention, config.target_score_range)
    labels = read_eval_scores(scores_path, man, config.target_score_convention, config.target_score_range)
    images = ImageSet.from_manifest(man, with_scores=False)
    preds = predict(model, images, config)
    return evaluate_predictions(preds, labels), preds, images.names


# --------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    checkpoint: Path
    metrics: MetricsReport | None
    telemetry: list[dict]
    out_dir: Path


def run(config: TrainingConfig, resume: str | Path | None = None, domains: Domains | None = None) -> RunResult:
    """Pretrain on source (unless resuming past it), adapt, evaluate the last-epoch model on target."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    domains = domains or load_domains(config)
    t0 = time.process_time()

    model = build_model(config)
    start_epoch = 0
    step = 0
    tele_path = out / "telemetry.jsonl"
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_digest and ckpt.config_digest != config.digest():
            log.warning("resuming from %s trained with a different config (digest %s)", resume, ckpt.config_digest)
        model.load_state_dict(ckpt.model_state())
        rng = restore_rng(ckpt)
        phase = ckpt.phase
        if phase == "uda":
            start_epoch = ckpt.epoch
    else:
        rng = np.random.default_rng(config.seed)
        phase = "init"
        if tele_path.exists():
            tele_path.unlink()
    telemetry = Telemetry(tele_path)

    try:
        if phase == "init":
            ck = pretrain_source(config, model, domains.source, rng, telemetry)
            save_checkpoint(out / "checkpoint_pretrain.ckpt", ck)
            step = len(telemetry.records)

        # optimizer state is reset between phases
        opt = make_optimizer(model, config)
        if resume is not None and phase == "uda":
            restore_optimizer(opt, ckpt)
        tracker = RelaxationTracker(config.tau, config.srocc_momentum)
        final = out / "checkpoint.ckpt"
        for epoch in range(start_epoch, config.uda_epochs):
            step = uda_epoch(config, model, opt, domains, rng, tracker, telemetry, epoch, step)
            ck = pack_training_state(
                model, opt, rng, epoch=epoch + 1, phase="uda", config=config.to_dict(), config_digest=config.digest()
            )
            save_checkpoint(final, ck)
        if config.uda_epochs == 0 or start_epoch >= config.uda_epochs:
            ck = pack_training_state(
                model, opt, rng, epoch=config.uda_epochs, phase="uda", config=config.to_dict(), config_digest=config.digest()
            )
            save_checkpoint(final, ck)
    finally:
        telemetry.close()

    metrics = None
    if config.target_scores and Path(config.target_scores).is_file():
        metrics, preds, names = evaluate_files(model, config, config.target_manifest, config.target_scores)
        (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
        _write_predictions(out / "target_predictions.csv", names, preds)
    else:
        log.warning("target eval scores %r not found; skipping evaluation", config.target_scores)
    log.info("run finished in %.1f CPU-s", time.process_time() - t0)
    return RunResult(final, metrics, telemetry.records, out)


def _write_predictions(path: Path, names, preds):
    with path.open("w", encoding="utf-8") as fh:
        fh.write("path,prediction\n")
        for n, p in zip(names, preds):
            fh.write(f"{n},{p:.8f}\n")
