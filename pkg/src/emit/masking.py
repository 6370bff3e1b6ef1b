"""Rate-of-change event masking and its ablation variants."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .data import LabeledSequence, TripletSequence

VARIANTS = ("composite", "time-only", "value-only", "feature-only", "sum", "random")


class MaskKind(IntEnum):
    NONE = 0
    TIME = 1
    VALUE = 2
    FEATURE = 3
    SUM = 4

    @property
    def label(self) -> str:
        return self.name.lower()


_FIXED_KIND = {
    "time-only": MaskKind.TIME,
    "value-only": MaskKind.VALUE,
    "feature-only": MaskKind.FEATURE,
    "sum": MaskKind.SUM,
}

# stream ids separating the independent uniform draws for one sequence
_POSITION_STREAM = 0
_KIND_STREAM = 1


@dataclass(frozen=True)
class MaskConfig:
    theta: float = 0.01
    alpha_mask: float = 0.2
    variant: str = "composite"
    random_rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError("theta must be >= 0")
        if not 0.0 <= self.alpha_mask <= 1.0:
            raise ValueError("alpha_mask must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown mask variant {self.variant!r}; choose from {VARIANTS}")
        if self.random_rate is not None and not 0.0 <= self.random_rate <= 1.0:
            raise ValueError("random_rate must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class MaskPlan:
    masked: np.ndarray
    kind: np.ndarray = field(default=None)

    def __post_init__(self):
        masked = np.asarray(self.masked, dtype=bool)
        object.__setattr__(self, "masked", masked)
        kind = np.zeros(len(masked), dtype=np.int8) if self.kind is None else np.asarray(self.kind, dtype=np.int8)
        if kind.shape != masked.shape:
            raise ValueError("mask and kind arrays must align")
        if np.any((kind != MaskKind.NONE) != masked):
            raise ValueError("a mask kind must be set exactly at masked positions")
        object.__setattr__(self, "kind", kind)

    def __len__(self) -> int:
        return len(self.masked)

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    def kind_map(self) -> dict[int, str]:
        return {int(i): MaskKind(k).label for i, k in enumerate(self.kind) if k}

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPlan):
            return NotImplemented
        return np.array_equal(self.masked, other.masked) and np.array_equal(self.kind, other.kind)

    __hash__ = None


def rate_of_change(values, times) -> np.ndarray:
    """Forward difference quotient; 0 across zero time gaps and at the last point."""
    x = np.asarray(values, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if x.shape != t.shape or x.ndim != 1:
        raise ValueError(f"values and times must be 1-d of equal length, got {x.shape} and {t.shape}")
    if len(x) == 0:
        raise ValueError("rate_of_change needs at least one observation")
    r = np.zeros(len(x))
    dt = np.diff(t)
    dx = np.diff(x)
    nz = dt != 0
    r[:-1][nz] = dx[nz] / dt[nz]
    return r


def significance(seq: TripletSequence, theta: float) -> np.ndarray:
    """Per position: 1 significant, 0 insignificant, -1 never masked (feature seen once).

    Rates use the sequence's current values over its raw-hour gaps.
    """
    out = np.full(len(seq), -1, dtype=np.int8)
    for f in np.unique(seq.features):
        idx = np.flatnonzero(seq.features == f)
        if len(idx) > 1:
            r = rate_of_change(seq.values[idx], seq.raw_times[idx])
            out[idx] = np.abs(r) > theta
    return out


def _id_key(seq_id: str) -> int:
    return int.from_bytes(hashlib.blake2b(seq_id.encode("utf-8"), digest_size=8).digest(), "little")


def sequence_rng(seed: int, seq_id: str, epoch: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, sequence id, epoch, stream).

    Draw ``i`` of the stream belongs to position ``i``, so results do not depend
    on the order in which sequences are visited.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _id_key(seq_id), int(epoch), int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def event_mask_from_significance(sig: np.ndarray, alpha_mask: float, u: np.ndarray) -> np.ndarray:
    return np.where(sig == 1, u < 1.0 - alpha_mask, np.where(sig == 0, u < alpha_mask, False))


def select_event_mask(seq: TripletSequence, config: MaskConfig, rng: np.random.Generator) -> np.ndarray:
    if len(seq) == 0:
        raise ValueError("cannot mask an empty sequence")
    u = rng.random(len(seq))
    return event_mask_from_significance(significance(seq, config.theta), config.alpha_mask, u)


def random_mask(seq: TripletSequence | int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    n = seq if isinstance(seq, (int, np.integer)) else len(seq)
    return rng.random(n) < rate


def assign_mask_kinds(masked, variant: str, rng: np.random.Generator) -> MaskPlan:
    if variant not in VARIANTS:
        raise ValueError(f"unknown mask variant {variant!r}")
    masked = np.asarray(masked, dtype=bool)
    if variant in _FIXED_KIND:
        kind = np.where(masked, _FIXED_KIND[variant], MaskKind.NONE)
    else:
        # composite, and the random baseline which swaps only the position rule
        drawn = rng.integers(MaskKind.TIME, MaskKind.FEATURE + 1, size=len(masked))
        kind = np.where(masked, drawn, MaskKind.NONE)
    return MaskPlan(masked, kind)


def make_plan(seq: TripletSequence, config: MaskConfig, epoch: int = 0,
              sig: np.ndarray | None = None) -> MaskPlan:
    """Keyed mask plan for one sequence and epoch.

    ``sig`` may carry precomputed :func:`significance` output to skip the
    per-feature rate computation.
    """
    pos_rng = sequence_rng(config.seed, seq.id, epoch, _POSITION_STREAM)
    kind_rng = sequence_rng(config.seed, seq.id, epoch, _KIND_STREAM)
    if config.variant == "random":
        if config.random_rate is None:
            raise ValueError("random variant needs random_rate (see matched_random_rate)")
        masked = random_mask(seq, config.random_rate, pos_rng)
    else:
        if sig is None:
            sig = significance(seq, config.theta)
        masked = event_mask_from_significance(sig, config.alpha_mask, pos_rng.random(len(seq)))
    return assign_mask_kinds(masked, config.variant, kind_rng)


def matched_random_rate(dataset: Sequence[LabeledSequence | TripletSequence], theta: float,
                        alpha_mask: float) -> float:
    """Expected event-mask rate under (theta, alpha_mask), for budget-matched random masking."""
    sig = np.concatenate([significance(_seq(d), theta) for d in dataset])
    if len(sig) == 0:
        return 0.0
    expected = (1.0 - alpha_mask) * np.sum(sig == 1) + alpha_mask * np.sum(sig == 0)
    return float(expected / len(sig))


def _seq(item) -> TripletSequence:
    return item.sequence if isinstance(item, LabeledSequence) else item


def mask_statistics(dataset: Sequence[LabeledSequence | TripletSequence], config: MaskConfig,
                    epoch: int = 0, feature_names: Sequence[str] | None = None) -> dict:
    """Counts of significant/insignificant positions and realised mask fractions."""
    if not dataset:
        raise ValueError("mask_statistics needs a non-empty dataset")
    if config.variant == "random" and config.random_rate is None:
        config = MaskConfig(config.theta, config.alpha_mask, config.variant,
                            matched_random_rate(dataset, config.theta, config.alpha_mask), config.seed)
    sig_all, masked_all, feat_all, kind_all = [], [], [], []
    for item in dataset:
        seq = _seq(item)
        sig = significance(seq, config.theta)
        plan = make_plan(seq, config, epoch, sig)
        sig_all.append(sig)
        masked_all.append(plan.masked)
        kind_all.append(plan.kind)
        feat_all.append(seq.features)
    sig = np.concatenate(sig_all)
    masked = np.concatenate(masked_all)
    feats = np.concatenate(feat_all)
    kinds = np.concatenate(kind_all)

    def frac(num, den):
        return float(num) / float(den) if den else 0.0

    def block(sel):
        s, u, e = sel & (sig == 1), sel & (sig == 0), sel & (sig == -1)
        return {
            "positions": int(sel.sum()),
            "significant": int(s.sum()),
            "insignificant": int(u.sum()),
            "single_observation": int(e.sum()),
            "masked": int((masked & sel).sum()),
            "masked_significant": int((masked & s).sum()),
            "masked_insignificant": int((masked & u).sum()),
            "masked_fraction_significant": frac((masked & s).sum(), s.sum()),
            "masked_fraction_insignificant": frac((masked & u).sum(), u.sum()),
            "mask_rate": frac((masked & sel).sum(), sel.sum()),
        }

    everything = np.ones(len(sig), dtype=bool)
    summary = {
        "theta": float(config.theta),
        "alpha_mask": float(config.alpha_mask),
        "variant": config.variant,
        "random_rate": config.random_rate,
        "seed": config.seed,
        "epoch": epoch,
        "sequences": len(dataset),
        **block(everything),
        "expected_masked": float((1.0 - config.alpha_mask) * np.sum(sig == 1)
                                 + config.alpha_mask * np.sum(sig == 0)),
        "kind_counts": {MaskKind(k).label: int(np.sum(kinds == k)) for k in range(1, 5)},
    }
    per_feature = []
    for f in np.unique(feats):
        entry = {"feature": feature_names[f] if feature_names is not None else int(f)}
        entry.update(block(feats == f))
        per_feature.append(entry)
    summary["per_feature"] = per_feature
    return summary
