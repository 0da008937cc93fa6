"""``styleam`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainingConfig, config_schema
from .errors import ConfigError, InputError, StyleAMError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("styleam")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _schema_text() -> str:
    lines = ["configuration keys (JSON object; unknown keys are rejected):"]
    for row in config_schema():
        default = json.dumps(row["default"]) if not isinstance(row["default"], tuple) else json.dumps(list(row["default"]))
        lines.append(f"  {row['key']:<24} default {default:<20} {row['constraint']}")
    return "\n".join(lines)


def cmd_make_toy(args) -> int:
    from .data import generate_toy_domains

    doms = generate_toy_domains(args.out, args.n_source, args.n_target, args.seed)
    print(doms.source_manifest)
    print(doms.target_manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import run

    config = TrainingConfig.from_json(args.config)
    for p in (config.source_manifest, config.target_manifest):
        if not p or not Path(p).is_file():
            raise _Fail(EXIT_IO, f"manifest not found: {p}")
    try:
        result = run(config, resume=args.resume)
    except (StyleAMError, OSError, ValueError):
        raise
    except Exception as e:  # anything else is a training failure
        raise _Fail(EXIT_RUNTIME, f"training failed: {type(e).__name__}: {e}") from e
    print(result.checkpoint)
    if result.metrics is not None:
        print(json.dumps(result.metrics.to_dict()))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate_files, load_model

    for p in (args.checkpoint, args.manifest, args.scores):
        if not Path(p).is_file():
            raise _Fail(EXIT_IO, f"file not found: {p}")
    model, ckpt = load_model(args.checkpoint)
    config = TrainingConfig.from_dict(ckpt.config) if ckpt.config else TrainingConfig(mode=ckpt.mode)
    config = config.replace(target_score_convention=args.convention, target_score_range=tuple(args.score_range))
    report, preds, names = evaluate_files(model, config, args.manifest, args.scores)
    out = report.to_dict()
    if args.dump:
        with open(args.dump, "w") as fh:
            fh.write("path,prediction\n")
            for n, p in zip(names, preds):
                fh.write(f"{n},{float(p)!r}\n")
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_analyze_styles(args) -> int:
    from .analysis import analyze_styles

    for p in (args.checkpoint, args.manifest, args.scores):
        if not Path(p).is_file():
            raise _Fail(EXIT_IO, f"file not found: {p}")
    try:
        stages = [int(s) for s in args.stages.split(",")] if args.stages else None
    except ValueError:
        raise ConfigError(f"stages: expected comma-separated integers, got {args.stages!r}") from None
    summary = analyze_styles(
        args.checkpoint,
        args.manifest,
        args.scores,
        stages=stages,
        out_dir=args.out,
        domain=args.domain,
        score_convention=args.convention,
        score_range=tuple(args.score_range),
    )
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_import_weights(args) -> int:
    import torch

    from .checkpoint import pack_training_state
    from .nn import StyleAMNet, resnet18_to_backbone_state

    if not Path(args.state_dict).is_file():
        raise _Fail(EXIT_IO, f"file not found: {args.state_dict}")
    state = torch.load(args.state_dict, map_location="cpu", weights_only=True)
    model = StyleAMNet("full", "style")
    missing, unexpected = model.backbone.load_state_dict(resnet18_to_backbone_state(state), strict=False)
    if missing:
        raise _Fail(EXIT_USAGE, f"{args.state_dict}: not a ResNet-18 state dict (missing {missing[:3]}...)")
    save_checkpoint(args.out, pack_training_state(model, phase="imported"))
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="styleam",
        description="Unsupervised domain adaptation for no-reference image quality assessment.",
        epilog=_schema_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("make-toy", help="generate the synthetic two-domain benchmark")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--n-source", type=int, default=400)
    t.add_argument("--n-target", type=int, default=400)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_make_toy)

    tr = sub.add_parser(
        "train", help="source pretraining followed by adaptation", epilog=_schema_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    tr.add_argument("--config", required=True, type=Path)
    tr.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    tr.set_defaults(func=cmd_train)

    def _scored(sp):
        sp.add_argument("--checkpoint", required=True, type=Path)
        sp.add_argument("--manifest", required=True, type=Path)
        sp.add_argument("--scores", required=True, type=Path)
        sp.add_argument("--convention", default="mos_higher_better", choices=["mos_higher_better", "dmos_higher_worse"])
        sp.add_argument("--score-range", nargs=2, type=float, default=[0.0, 5.0], metavar=("LO", "HI"))

    ev = sub.add_parser("eval", help="center-crop evaluation of a checkpoint")
    _scored(ev)
    ev.add_argument("--dump", type=Path, default=None, help="write per-sample predictions to this CSV")
    ev.set_defaults(func=cmd_eval)

    an = sub.add_parser("analyze-styles", help="export per-stage styles and their correlation with quality")
    _scored(an)
    an.add_argument("--stages", default=None, help="comma-separated stage indices (default: all)")
    an.add_argument("--out", type=Path, default=Path("analysis"))
    an.add_argument("--domain", default="source")
    an.set_defaults(func=cmd_analyze_styles)

    iw = sub.add_parser("import-weights", help="convert a ResNet-18 state dict into a full-mode checkpoint")
    iw.add_argument("--state-dict", required=True, type=Path)
    iw.add_argument("--out", required=True, type=Path)
    iw.set_defaults(func=cmd_import_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, InputError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except StyleAMError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
