"""Binary-classification metrics with explicit tie conventions.

* ROC-AUC: probability a random positive outscores a random negative, ties
  counted as one half.
* PR-AUC: average precision over distinct score thresholds; a group of tied
  scores enters as one step, so every positive in the group is credited with
  the precision at the end of the group.
* min(Re, Pr): best achievable min(recall, precision) over the same thresholds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isfinite(s)):
        raise MetricError("scores must be finite")
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks implement the half-credit tie rule
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_counts(s: np.ndarray, y: np.ndarray):
    """Cumulative (tp, fp) at each distinct score, highest threshold first."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    return tp[last_of_group], fp[last_of_group]


def pr_auc(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("PR-AUC needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def min_recall_precision(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("min(Re, Pr) needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    # the reject-all threshold scores 0 and never beats these
    return float(np.max(np.minimum(tp / n_pos, tp / (tp + fp))))


@dataclass
class MetricReport:
    roc_auc: float
    pr_auc: float
    min_re_pr: float
    n_pos: int
    n_neg: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("roc_auc", "pr_auc", "min_re_pr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        return cls(**obj)


def metric_report(scores, labels, metadata: dict | None = None) -> MetricReport:
    s, y = _prepare(scores, labels)
    return MetricReport(
        roc_auc=roc_auc(s, y),
        pr_auc=pr_auc(s, y),
        min_re_pr=min_recall_precision(s, y),
        n_pos=int(y.sum()),
        n_neg=int((~y).sum()),
        metadata=dict(metadata or {}),
    )


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def dumps_report(obj) -> str:
    """Stable JSON text: sorted keys, full float precision."""
    if hasattr(obj, "to_json"):
        obj = obj.to_json()
    return json.dumps(obj, sort_keys=True, indent=2, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def emit_report(results, path) -> Path:
    path = Path(path)
    try:
        path.write_text(dumps_report(results), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path
