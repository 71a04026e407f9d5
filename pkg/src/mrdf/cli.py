"""Command-line entry point: ``mrdf <verb> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from mrdf import config as config_mod
from mrdf.config import Config
from mrdf.dataio import (
    InsufficientSamplesError,
    Manifest,
    ManifestError,
    SynthSpec,
    balanced_subset,
    generate_synthetic,
    holdout_identities,
    identity_kfold,
    load_features,
    load_manifest,
    write_foldplan,
    write_manifest,
)
from mrdf.frontend import align
from mrdf.losses import NonFiniteLossError

logger = logging.getLogger("mrdf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"flat key: value YAML file (default: ${config_mod.CONFIG_ENV_VAR})")
    p.add_argument("--preset", choices=("full", "tiny"), default=None,
                   help="full: ResNet-18 encoders, 12 blocks; tiny: desk-scale MLP model")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set fusion.n_blocks=4 (repeatable)")
    p.add_argument("--variant", choices=("margin", "ce", "baseline"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="training seed")


def _data_arg(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="manifest file or a directory holding manifest.tsv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mrdf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic feature corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--clips", type=int, default=SynthSpec.clips_per_category, help="clips per category")
    p.add_argument("--identities", type=int, default=SynthSpec.n_identities)
    p.add_argument("--frames", type=int, default=SynthSpec.frames)
    p.add_argument("--latent-dim", type=int, default=SynthSpec.latent_dim)
    p.add_argument("--audio-dim", type=int, default=SynthSpec.audio_dim)
    p.add_argument("--visual-dim", type=int, default=SynthSpec.visual_dim)
    p.add_argument("--audio-ratio", type=int, default=SynthSpec.audio_ratio)
    p.add_argument("--identity-scale", type=float, default=SynthSpec.identity_scale)
    p.add_argument("--noise", type=float, default=SynthSpec.noise_scale)
    p.add_argument("--shift", type=float, default=SynthSpec.manipulation_shift)
    p.add_argument("--visual-shift-scale", type=float, default=SynthSpec.visual_shift_scale)

    p = sub.add_parser("manifest", help="validate and summarize a manifest; optionally balance it")
    _data_arg(p)
    p.add_argument("--balance", type=int, metavar="N", help="keep N clips per category")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the (balanced) manifest here")

    p = sub.add_parser("split", help="write an identity-disjoint k-fold plan")
    _data_arg(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    _data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _data_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("crossval", help="identity-disjoint k-fold train/evaluate")
    _data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    _add_config_args(p)

    p = sub.add_parser("visualize", help="t-SNE plots of clip embeddings")
    _data_arg(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stage", action="append",
                   choices=("pre_fusion_audio", "pre_fusion_visual", "post_fusion"),
                   help="repeatable; default: all stages")
    p.add_argument("--out", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("check", help="run the oracle and gradient self-tests")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _manifest_path(data: str) -> Path:
    p = Path(data)
    return p / "manifest.tsv" if p.is_dir() else p


def _parse_overrides(items: List[str]) -> Dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def effective_config(args) -> Config:
    cfg = config_mod.load_config(args.config)
    if args.preset == "tiny":
        cfg = config_mod.apply_overrides(cfg, config_mod.flatten(config_mod.tiny_config()))
    flags = {
        "loss.variant": args.variant,
        "train.epochs": args.epochs,
        "train.batch_size": args.batch_size,
        "train.lr": args.lr,
        "train.seed": args.seed,
        "eval.k": getattr(args, "k", None),
    }
    overrides = {k: v for k, v in flags.items() if v is not None}
    try:
        overrides.update(_parse_overrides(args.overrides))
        return config_mod.apply_overrides(cfg, overrides)
    except KeyError as exc:
        raise UsageError(f"--set: {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config value: {exc}") from None


def fit_input_shapes(cfg: Config, manifest: Manifest) -> Config:
    """Match encoder input shapes to the stored features of the first clip."""
    s = manifest.samples[0]
    clip = align(load_features(manifest.resolve(s.audio_ref)),
                 load_features(manifest.resolve(s.visual_ref)), cfg.frontend.ratio)
    a_shape = list(clip.audio_frames.shape[1:])
    v_shape = list(clip.visual_frames.shape[1:])
    if a_shape != list(cfg.model.audio.input_shape) or v_shape != list(cfg.model.visual.input_shape):
        logger.info("encoder input shapes set from data: audio %s, visual %s", a_shape, v_shape)
        cfg = config_mod.apply_overrides(
            cfg, {"model.audio.input_shape": a_shape, "model.visual.input_shape": v_shape}
        )
    return cfg


def _load(args, cfg: Optional[Config] = None) -> Manifest:
    policy = cfg.loss.pairing_policy if cfg is not None else "any_fake_negative"
    return load_manifest(_manifest_path(args.data), policy)


def cmd_synth(args) -> int:
    spec = SynthSpec(
        n_identities=args.identities, clips_per_category=args.clips, frames=args.frames,
        latent_dim=args.latent_dim, noise_scale=args.noise, manipulation_shift=args.shift,
        seed=args.seed, audio_dim=args.audio_dim, visual_dim=args.visual_dim,
        audio_ratio=args.audio_ratio, visual_shift_scale=args.visual_shift_scale,
        identity_scale=args.identity_scale,
    )
    m = generate_synthetic(spec, args.out)
    print(f"wrote {len(m)} clips ({len(m.identities)} identities) to {m.source}")
    return EXIT_OK


def cmd_manifest(args) -> int:
    m = _load(args)
    if args.balance is not None:
        m = balanced_subset(m, args.balance, args.seed)
    counts = m.category_counts()
    print(f"samples: {len(m)}")
    print(f"identities: {len(m.identities)}")
    for c, n in counts.items():
        print(f"{c.value}: {n}")
    if args.out:
        # keep feature refs valid relative to the new location
        root = m.root.resolve()

        def rebase(ref: str) -> str:
            return ref if Path(ref).is_absolute() else str(root / ref)

        moved = tuple(replace(s, audio_ref=rebase(s.audio_ref), visual_ref=rebase(s.visual_ref))
                      for s in m.samples)
        write_manifest(Manifest(moved, args.out), args.out)
    return EXIT_OK


def cmd_split(args) -> int:
    m = _load(args)
    try:
        plan = identity_kfold(m, args.k, args.seed)
    except ValueError as exc:
        if args.k < 2:
            raise UsageError(f"--k: {exc}") from None
        raise
    write_foldplan(plan, args.out)
    for i, (train, test) in enumerate(plan.folds):
        print(f"fold {i}: train={len(train)} test={len(test)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from mrdf.trainer import resume, train

    cfg = effective_config(args)
    m = _load(args, cfg)
    cfg = fit_input_shapes(cfg, m)
    out = Path(args.out)
    config_mod.save_config(cfg, out / "config.yaml")
    fit_m, val_m = holdout_identities(m, cfg.train.val_fraction, cfg.train.seed)
    state = resume(args.resume, cfg) if args.resume else None
    state = train(fit_m, val_m if len(val_m) else None, cfg, out, state=state)
    with open(out / "history.json", "w", encoding="utf-8") as fh:
        json.dump(state.history, fh, indent=2)
    last = state.history[-1]
    print(f"trained {state.epoch} epochs; final loss {last['total']:.4f}"
          + (f", val AUC {last['val_auc']:.4f}" if "val_auc" in last else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from mrdf.evaluation import evaluate, write_predictions, write_report
    from mrdf.trainer import ClipDataset, load_model

    model, cfg = load_model(args.checkpoint)
    m = _load(args, cfg)
    out = Path(args.out)
    config_mod.save_config(cfg, out / "config.yaml")
    ds = ClipDataset(m, cfg.frontend.ratio)
    report, preds = evaluate(model, m, cfg, dataset=ds)
    write_report(report, out)
    write_predictions(ds.samples, preds, out / "predictions.tsv")
    print(f"accuracy {report.accuracy:.4f}  auc {report.auc:.4f}  n={report.n}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    from mrdf.evaluation import crossval

    cfg = effective_config(args)
    m = _load(args, cfg)
    cfg = fit_input_shapes(cfg, m)
    out = Path(args.out)
    config_mod.save_config(cfg, out / "config.yaml")
    cv = crossval(m, cfg.eval.k, cfg, out)
    print(f"{cv.k}-fold: accuracy {cv.mean['accuracy']:.4f} +- {cv.std['accuracy']:.4f}, "
          f"auc {cv.mean['auc']:.4f} +- {cv.std['auc']:.4f}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    from mrdf.trainer import ClipDataset, load_model
    from mrdf.viz import STAGES, dump_embeddings, project_2d, write_dump

    model, cfg = load_model(args.checkpoint)
    cfg = config_mod.apply_overrides(cfg, {"eval.perplexity": args.perplexity})
    m = _load(args, cfg)
    out = Path(args.out)
    config_mod.save_config(cfg, out / "config.yaml")
    ds = ClipDataset(m, cfg.frontend.ratio)
    for stage in args.stage or list(STAGES):
        dump = dump_embeddings(model, m, stage, cfg, dataset=ds)
        write_dump(dump, out / f"{stage}_embeddings.tsv")
        img, coords, _ = project_2d(dump, out / stage, args.perplexity, args.seed)
        print(f"{stage}: {img} {coords}")
    return EXIT_OK


def cmd_check(args) -> int:
    from mrdf.checks import run_checks

    results = run_checks(seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth,
    "manifest": cmd_manifest,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "visualize": cmd_visualize,
    "check": cmd_check,
}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"mrdf {args.verb}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"mrdf {args.verb}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, InsufficientSamplesError, FileNotFoundError, OSError, ValueError, RuntimeError) as exc:
        cause = exc.__cause__ if isinstance(exc.__cause__, NonFiniteLossError) else None
        if cause is not None:
            print(f"mrdf {args.verb}: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"mrdf {args.verb}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
