"""Experiment orchestration: flat configs, the pretrain -> fine-tune -> evaluate pipeline,
mask-variant ablations and (theta, alpha_mask) sweeps."""

from __future__ import annotations

import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .data import (
    FeatureVocab,
    LabeledSequence,
    NormalizationStats,
    SplitSpec,
    fit_normalization,
    normalize_dataset,
    split,
)
from .masking import VARIANTS, MaskConfig, matched_random_rate
from .metrics import MetricReport, config_hash, metric_report
from .model import EmitModel, ModelConfig
from .numerics.tensor import default_dtype
from .synthetic import SyntheticConfig, generate_synthetic, synthetic_vocab
from .training import FinetuneConfig, PretrainConfig, finetune, pretrain

logger = logging.getLogger(__name__)

THETA_GRID = (1e-1, 1e-2, 1e-3)
ALPHA_GRID = tuple(round(0.1 * i, 10) for i in range(11))
METRICS = ("roc_auc", "pr_auc", "min_re_pr")

# keys that must carry a section prefix because several sections share the name
_PREFIX_ONLY = {
    "synth": {"horizon", "seed"},
    "split": {"train", "validation", "test"},
}
SECTIONS = ("model", "mask", "pretrain", "finetune", "split", "synth")
_ALIASES = {"lambda": "lam", "label-fraction": "label_fraction", "alpha-mask": "alpha_mask"}


def override(flat: dict, key: str, value) -> dict:
    """Set ``key`` and drop section-prefixed copies so the override always wins."""
    norm = _ALIASES.get(key, key).replace("-", "_")
    out = {k: v for k, v in flat.items()
           if _ALIASES.get(k, k).replace("-", "_") not in {norm, *(f"{s}_{norm}" for s in SECTIONS)}}
    out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return obj


def _normalise_keys(flat: dict) -> dict:
    return {_ALIASES.get(k, k).replace("-", "_"): v for k, v in flat.items()}


def resolve(cls, flat: dict, prefix: str, **fixed):
    """Build dataclass ``cls`` from a flat mapping.

    ``<prefix>_<field>`` wins over a bare ``<field>``; names listed in
    ``_PREFIX_ONLY`` are only read with their prefix.
    """
    flat = _normalise_keys(flat)
    kwargs: dict[str, Any] = {}
    for f in fields(cls):
        if f.name in fixed:
            kwargs[f.name] = fixed[f.name]
            continue
        key = f"{prefix}_{f.name}"
        if key in flat:
            kwargs[f.name] = flat[key]
        elif f.name in flat and f.name not in _PREFIX_ONLY.get(prefix, ()):
            kwargs[f.name] = flat[f.name]
    for name, value in list(kwargs.items()):
        if isinstance(value, list):
            kwargs[name] = tuple(value)
    return cls(**kwargs)


def mask_config(flat: dict) -> MaskConfig:
    return resolve(MaskConfig, flat, "mask")


def pretrain_config(flat: dict) -> PretrainConfig:
    return resolve(PretrainConfig, flat, "pretrain", mask=mask_config(flat))


def finetune_config(flat: dict) -> FinetuneConfig:
    return resolve(FinetuneConfig, flat, "finetune")


def model_config(flat: dict, n_features: int) -> ModelConfig:
    return resolve(ModelConfig, flat, "model", n_features=n_features)


def split_spec(flat: dict) -> SplitSpec:
    # label_fraction applies at fine-tuning time, not at the split
    return resolve(SplitSpec, flat, "split", label_fraction=1.0)


def synthetic_config(flat: dict) -> SyntheticConfig:
    return resolve(SyntheticConfig, flat, "synth")


def precision(flat: dict):
    bits = int(_normalise_keys(flat).get("precision", 64))
    if bits not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    return np.float32 if bits == 32 else np.float64


def version_string() -> str:
    return f"emit-{__version__}"


def dataset_for(flat: dict, data_path: str | Path | None):
    """Load a JSON-lines dataset, or synthesize one from the config."""
    from .data import load_dataset

    if data_path is not None:
        return load_dataset(data_path)
    cfg = synthetic_config(flat)
    return generate_synthetic(cfg, synth_seed(flat)), synthetic_vocab(cfg.n_features)


def synth_seed(flat: dict) -> int:
    """Generator seed: ``synth_seed``, else the global ``seed``, else 0."""
    flat = _normalise_keys(flat)
    return int(flat.get("synth_seed", flat.get("seed", 0)))


class PreparedSplits:
    """Train/validation/test splits normalized with train statistics (or given ``stats``)."""

    def __init__(self, data: Sequence[LabeledSequence], vocab: FeatureVocab, flat: dict,
                 stats: NormalizationStats | None = None):
        train, val, test = split(data, split_spec(flat))
        self.vocab = vocab
        self.stats = stats if stats is not None else fit_normalization(train, vocab)
        self.train = normalize_dataset(train, self.stats)
        self.validation = normalize_dataset(val, self.stats)
        self.test = normalize_dataset(test, self.stats)

    def extras(self) -> dict:
        return {"vocab": list(self.vocab.names), "normalization": self.stats.to_json(self.vocab)}


def checkpoint_extras(doc: dict) -> tuple[FeatureVocab, NormalizationStats] | None:
    if "vocab" not in doc or "normalization" not in doc:
        return None
    vocab = FeatureVocab(tuple(doc["vocab"]))
    return vocab, NormalizationStats.from_json(doc["normalization"], vocab)


def evaluate_model(model: EmitModel, data: Sequence[LabeledSequence], metadata: dict | None = None) -> MetricReport:
    scores = model.predict_proba([d.sequence for d in data])
    return metric_report(scores, [d.label for d in data], metadata)


def run_pipeline(splits: PreparedSplits, flat: dict, seed: int, pretrained: bool = True) -> dict:
    """Pretrain (optional), fine-tune and evaluate on the test split for one seed."""
    flat = {**flat, "seed": seed}
    with default_dtype(precision(flat)):
        mcfg = model_config(flat, splits.vocab.size)
        checkpoint = None
        pre_report = None
        if pretrained:
            model = EmitModel(mcfg)
            pre_report, checkpoint = pretrain(splits.train, splits.validation, model, pretrain_config(flat))
        fin_report, model = finetune(splits.train, splits.validation, finetune_config(flat),
                                     model_config=mcfg, checkpoint=checkpoint)
        report = evaluate_model(model, splits.test, {
            "seed": seed, "config_hash": config_hash(flat), "version": version_string()})
    return {"metrics": report, "pretrain": pre_report, "finetune": fin_report}


def _spread(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "values": [float(v) for v in arr]}


def ablate(data, vocab: FeatureVocab, flat: dict, seeds: int, variants: Sequence[str] = VARIANTS,
           progress=None) -> dict:
    """Every mask variant x seed; the random variant is budget-matched to the event mask."""
    splits = PreparedSplits(data, vocab, flat)
    mask = mask_config(flat)
    budget = matched_random_rate(splits.train, mask.theta, mask.alpha_mask)
    rows = []
    for seed in range(seeds):
        for variant in variants:
            run_flat = {**flat, "variant": variant}
            if variant == "random":
                run_flat["random_rate"] = budget
            out = run_pipeline(splits, run_flat, seed)
            row = {"variant": variant, "seed": seed,
                   **{m: getattr(out["metrics"], m) for m in METRICS}}
            rows.append(row)
            if progress:
                progress(row)
    summary = {}
    for variant in variants:
        picked = [r for r in rows if r["variant"] == variant]
        summary[variant] = {m: _spread([r[m] for r in picked]) for m in METRICS}
    comparison = None
    if "composite" in summary and "random" in summary:
        comparison = {
            "mask_budget": budget,
            **{m: summary["composite"][m]["mean"] - summary["random"][m]["mean"] for m in METRICS},
        }
    return {
        "kind": "ablation",
        "spread": "sample standard deviation over seeds",
        "seeds": seeds,
        "theta": mask.theta,
        "alpha_mask": mask.alpha_mask,
        "event_mask_rate": budget,
        "variants": summary,
        "composite_minus_random": comparison,
        "runs": rows,
        "config": flat,
        "config_hash": config_hash(flat),
        "version": version_string(),
    }


def format_ablation_table(result: dict) -> str:
    lines = [f"{'variant':<14}" + "".join(f"{m:>22}" for m in METRICS)]
    for variant, stats in result["variants"].items():
        cells = "".join(f"{stats[m]['mean']:>13.4f} ± {stats[m]['std']:<6.4f}" for m in METRICS)
        lines.append(f"{variant:<14}{cells}")
    cmp = result.get("composite_minus_random")
    if cmp:
        lines.append(f"composite - random (mask budget {cmp['mask_budget']:.4f}): "
                     + ", ".join(f"{m} {cmp[m]:+.4f}" for m in METRICS))
    return "\n".join(lines)


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(x) for x in text.split(",") if x.strip()]


def sweep(data, vocab: FeatureVocab, flat: dict, thetas: Sequence[float] = THETA_GRID,
          alphas: Sequence[float] = ALPHA_GRID, seeds: int = 1, progress=None) -> list[dict]:
    splits = PreparedSplits(data, vocab, flat)
    rows = []
    for theta in thetas:
        for alpha in alphas:
            for seed in range(seeds):
                out = run_pipeline(splits, {**flat, "theta": theta, "alpha_mask": alpha}, seed)
                row = {"theta": float(theta), "alpha_mask": float(alpha), "seed": seed,
                       **{m: getattr(out["metrics"], m) for m in METRICS}}
                rows.append(row)
                if progress:
                    progress(row)
    return rows
