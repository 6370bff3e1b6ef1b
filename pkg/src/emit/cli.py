"""Command-line entry point: ``emit <subcommand> [flags]``.

Every subcommand accepts ``--config file.json`` (a flat mapping of config
fields); explicit flags override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DatasetError, fit_normalization, load_dataset, normalize_dataset, save_dataset
from .masking import VARIANTS, mask_statistics
from .metrics import config_hash, dumps_report, emit_report
from .model import CheckpointError, EmitModel, load_checkpoint, save_checkpoint
from .numerics.tensor import default_dtype
from . import experiments as ex
from .synthetic import generate_synthetic, synthetic_vocab
from .training import TrainingError, finetune, pretrain

logger = logging.getLogger("emit")

# CLI flag -> flat config key
_OVERRIDES = {
    "theta": "theta",
    "alpha_mask": "alpha_mask",
    "variant": "variant",
    "lam": "lambda",
    "label_fraction": "label_fraction",
    "horizon": "horizon",
    "seed": "seed",
    "epochs": "max_epochs",
    "precision": "precision",
    "n_sequences": "n_sequences",
    "n_features": "n_features",
}


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--precision", type=int, choices=(32, 64))


def _add_mask_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta", type=float)
    p.add_argument("--alpha-mask", type=float, dest="alpha_mask")
    p.add_argument("--variant", choices=VARIANTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic JSON-lines dataset")
    _add_common(p)
    p.add_argument("--n-sequences", type=int, dest="n_sequences")
    p.add_argument("--n-features", type=int, dest="n_features")

    p = sub.add_parser("pretrain", help="event-masked pretraining")
    _add_common(p)
    _add_mask_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", type=float, dest="lam")
    p.add_argument("--horizon", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--report", help="TrainReport path (default: <out>.report.json)")

    p = sub.add_parser("finetune", help="binary classification fine-tuning")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="pretrained checkpoint; omit to train from scratch")
    p.add_argument("--label-fraction", type=float, dest="label_fraction")
    p.add_argument("--epochs", type=int)
    p.add_argument("--report", help="TrainReport path (default: <out>.report.json)")

    p = sub.add_parser("evaluate", help="score a dataset with a fine-tuned checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("mask-stats", help="summarise event-mask statistics for a dataset")
    _add_common(p, out_required=False)
    _add_mask_flags(p)
    p.add_argument("--data", required=True)

    p = sub.add_parser("ablate", help="mask-variant ablation over seeds")
    _add_common(p)
    _add_mask_flags(p)
    p.add_argument("--data", help="dataset; synthesized from the config when omitted")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", help="comma list (default: all six)")

    p = sub.add_parser("sweep", help="grid over theta and alpha_mask")
    _add_common(p)
    p.add_argument("--data", help="dataset; synthesized from the config when omitted")
    p.add_argument("--theta", help="value or comma list (default 0.1,0.01,0.001)")
    p.add_argument("--alpha-grid", default="0:1:0.1", help="start:stop:step or comma list")
    p.add_argument("--seeds", type=int, default=1)
    return parser


def _flat(args) -> dict:
    flat = ex.load_config(args.config)
    for attr, key in _OVERRIDES.items():
        value = getattr(args, attr, None)
        if value is None or (attr == "theta" and args.command == "sweep"):
            continue
        if attr == "epochs":
            key = f"{args.command}_max_epochs"
        flat = ex.override(flat, key, value)
    return flat


def _report_path(args) -> Path:
    return Path(args.report) if args.report else Path(args.out).with_suffix(".report.json")


def cmd_synth(args, flat) -> None:
    cfg = ex.synthetic_config(flat)
    save_dataset(args.out, generate_synthetic(cfg, ex.synth_seed(flat)), synthetic_vocab(cfg.n_features))


def _progress(record) -> None:
    logger.info("epoch %s: %s", record["epoch"], json.dumps(record, default=float))


def cmd_pretrain(args, flat) -> None:
    data, vocab = load_dataset(args.data)
    splits = ex.PreparedSplits(data, vocab, flat)
    with default_dtype(ex.precision(flat)):
        model = EmitModel(ex.model_config(flat, vocab.size))
        report, _ = pretrain(splits.train, splits.validation, model, ex.pretrain_config(flat), _progress)
        save_checkpoint(model, args.out, splits.extras())
    emit_report(report, _report_path(args))


def cmd_finetune(args, flat) -> None:
    doc, vocab, stats = None, None, None
    if args.checkpoint:
        _, doc = load_checkpoint(args.checkpoint)
        extras = ex.checkpoint_extras(doc)
        if extras is not None:
            vocab, stats = extras
    data, vocab = load_dataset(args.data, vocab=vocab)
    splits = ex.PreparedSplits(data, vocab, flat, stats)
    with default_dtype(ex.precision(flat)):
        mcfg = ex.model_config(flat, vocab.size) if doc is None else None
        report, model = finetune(splits.train, splits.validation, ex.finetune_config(flat),
                                 model_config=mcfg, checkpoint=doc, progress=_progress)
        save_checkpoint(model, args.out, splits.extras())
        test = ex.evaluate_model(model, splits.test, {"seed": flat.get("seed", 0),
                                                      "config_hash": config_hash(flat),
                                                      "version": ex.version_string()})
    out = report.to_json()
    out["test_metrics"] = test.to_json()
    emit_report(out, _report_path(args))


def cmd_evaluate(args, flat) -> None:
    with default_dtype(ex.precision(flat)):
        model, doc = load_checkpoint(args.checkpoint)
        extras = ex.checkpoint_extras(doc)
        if extras is None:
            raise CheckpointError("checkpoint has no vocab/normalization; produce it with `emit finetune`")
        vocab, stats = extras
        data, _ = load_dataset(args.data, vocab=vocab, max_len=model.config.max_len)
        data = normalize_dataset(data, stats)
        report = ex.evaluate_model(model, data, {"seed": flat.get("seed", model.config.seed),
                                                 "config_hash": config_hash(doc["model_config"]),
                                                 "version": ex.version_string(),
                                                 "checkpoint": str(args.checkpoint)})
    emit_report(report, args.out)


def cmd_mask_stats(args, flat) -> None:
    data, vocab = load_dataset(args.data)
    data = normalize_dataset(data, fit_normalization(data, vocab))
    summary = mask_statistics(data, ex.mask_config(flat), feature_names=vocab.names)
    if args.out:
        emit_report(summary, args.out)
    else:
        sys.stdout.write(dumps_report(summary))


def cmd_ablate(args, flat) -> None:
    data, vocab = ex.dataset_for(flat, args.data)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    result = ex.ablate(data, vocab, flat, args.seeds, variants,
                       progress=lambda row: logger.info("%s", row))
    emit_report(result, args.out)
    print(ex.format_ablation_table(result))


def cmd_sweep(args, flat) -> None:
    data, vocab = ex.dataset_for(flat, args.data)
    thetas = ex.parse_grid(args.theta) if args.theta else list(ex.THETA_GRID)
    alphas = ex.parse_grid(args.alpha_grid)
    rows = ex.sweep(data, vocab, flat, thetas, alphas, args.seeds,
                    progress=lambda row: logger.info("%s", row))
    emit_report(rows, args.out)


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "mask-stats": cmd_mask_stats,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args, _flat(args))
    except FileNotFoundError as exc:
        print(f"emit: file not found: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingError, ValueError) as exc:
        print(f"emit: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
