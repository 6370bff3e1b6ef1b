"""Irregular triplet time series: containers, JSON-lines I/O, normalization, splits."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset input."""


class Observation(NamedTuple):
    time: float
    value: float
    feature: int


@dataclass(frozen=True)
class FeatureVocab:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DatasetError("feature names must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self._lookup[name]
        except KeyError:
            raise DatasetError(f"unknown feature {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._lookup

    @property
    def _lookup(self) -> dict[str, int]:
        cache = self.__dict__.get("_cache")
        if cache is None:
            cache = {n: i for i, n in enumerate(self.names)}
            object.__setattr__(self, "_cache", cache)
        return cache


@dataclass(frozen=True, eq=False)
class TripletSequence:
    """One irregular series stored column-wise.

    ``times``/``values`` are whatever scale the sequence currently has (raw
    after loading, z-scored after :func:`normalize`). ``raw_times`` always
    holds the original hours and is what rate-of-change and forecast windows
    are measured against.
    """

    id: str
    times: np.ndarray
    values: np.ndarray
    features: np.ndarray
    raw_times: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.values) == len(self.features) == n):
            raise DatasetError(f"sequence {self.id!r}: column lengths differ")
        if self.raw_times is None:
            object.__setattr__(self, "raw_times", self.times)
        elif len(self.raw_times) != n:
            raise DatasetError(f"sequence {self.id!r}: raw_times length differs")

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n(self) -> int:
        return len(self.times)

    @property
    def observations(self) -> list[Observation]:
        return [Observation(float(t), float(x), int(f))
                for t, x, f in zip(self.times, self.values, self.features)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripletSequence):
            return NotImplemented
        return (self.id == other.id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.raw_times, other.raw_times))

    __hash__ = None


@dataclass(frozen=True)
class LabeledSequence:
    sequence: TripletSequence
    label: int | None = None
    events: tuple[int, ...] = ()

    def __post_init__(self):
        if self.label is not None and self.label not in (0, 1):
            raise DatasetError(f"label must be 0 or 1, got {self.label!r}")


def make_sequence(seq_id: str, times, values, features, raw_times=None) -> TripletSequence:
    """Build a sequence sorted by time (stable, so same-time order is kept)."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    features = np.asarray(features, dtype=np.int64)
    order = np.argsort(times, kind="stable")
    raw = None if raw_times is None else np.asarray(raw_times, dtype=np.float64)[order]
    return TripletSequence(seq_id, times[order], values[order], features[order], raw)


def truncate(seq: TripletSequence, max_len: int) -> TripletSequence:
    """Keep the earliest ``max_len`` observations."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if len(seq) <= max_len:
        return seq
    return TripletSequence(seq.id, seq.times[:max_len], seq.values[:max_len],
                           seq.features[:max_len], seq.raw_times[:max_len])


def load_dataset(path, vocab: FeatureVocab | None = None,
                 max_len: int | None = None) -> tuple[list[LabeledSequence], FeatureVocab]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seq_id = str(rec["id"])
                obs = [(float(t), float(x), str(f)) for t, x, f in rec["obs"]]
                label = rec.get("label")
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed line ({exc})") from None
            if not obs:
                raise DatasetError(f"{path}:{lineno}: sequence {seq_id!r} has no observations")
            if any(t < 0 for t, _, _ in obs):
                raise DatasetError(f"{path}:{lineno}: negative time in sequence {seq_id!r}")
            if label is not None and label not in (0, 1):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1")
            rows.append((lineno, seq_id, obs, label))

    if vocab is None:
        names = sorted({f for _, _, obs, _ in rows for _, _, f in obs})
        vocab = FeatureVocab(tuple(names))

    data = []
    for lineno, seq_id, obs, label in rows:
        try:
            feats = [vocab.index(f) for _, _, f in obs]
        except DatasetError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
        seq = make_sequence(seq_id, [o[0] for o in obs], [o[1] for o in obs], feats)
        if max_len is not None:
            seq = truncate(seq, max_len)
        data.append(LabeledSequence(seq, label))
    return data, vocab


def save_dataset(path, data: Iterable[LabeledSequence], vocab: FeatureVocab) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in data:
            seq = item.sequence
            rec = {
                "id": seq.id,
                "obs": [[float(t), float(x), vocab.names[f]]
                        for t, x, f in zip(seq.raw_times, seq.values, seq.features)],
            }
            if item.label is not None:
                rec["label"] = int(item.label)
            fh.write(json.dumps(rec) + "\n")


@dataclass(frozen=True)
class NormalizationStats:
    value_mean: np.ndarray
    value_std: np.ndarray
    time_mean: float
    time_std: float

    @classmethod
    def identity(cls, n_features: int) -> "NormalizationStats":
        return cls(np.zeros(n_features), np.ones(n_features), 0.0, 1.0)

    def to_json(self, vocab: FeatureVocab) -> dict:
        out = {name: {"mean": float(self.value_mean[i]), "std": float(self.value_std[i])}
               for i, name in enumerate(vocab.names)}
        out["time"] = {"mean": float(self.time_mean), "std": float(self.time_std)}
        return out

    @classmethod
    def from_json(cls, obj: dict, vocab: FeatureVocab) -> "NormalizationStats":
        try:
            mean = np.array([obj[n]["mean"] for n in vocab.names], dtype=np.float64)
            std = np.array([obj[n]["std"] for n in vocab.names], dtype=np.float64)
            return cls(mean, std, float(obj["time"]["mean"]), float(obj["time"]["std"]))
        except KeyError as exc:
            raise DatasetError(f"stats missing entry {exc}") from None


def _safe_std(x: np.ndarray) -> float:
    if len(x) < 2:
        return 1.0
    s = float(np.std(x))
    return s if s > 0 else 1.0


def fit_normalization(train: Sequence[LabeledSequence], vocab: FeatureVocab) -> NormalizationStats:
    """Population mean/std per feature and over all timestamps."""
    if not train:
        raise DatasetError("cannot fit normalization on an empty training set")
    values = np.concatenate([s.sequence.values for s in train])
    feats = np.concatenate([s.sequence.features for s in train])
    times = np.concatenate([s.sequence.raw_times for s in train])
    mean = np.zeros(vocab.size)
    std = np.ones(vocab.size)
    for f in range(vocab.size):
        v = values[feats == f]
        if len(v):
            mean[f] = v.mean()
            std[f] = _safe_std(v)
    return NormalizationStats(mean, std, float(times.mean()), _safe_std(times))


def normalize(seq: TripletSequence, stats: NormalizationStats) -> TripletSequence:
    if len(seq) and seq.features.max() >= len(stats.value_mean):
        raise DatasetError(f"sequence {seq.id!r} has a feature not covered by the stats")
    f = seq.features
    values = (seq.values - stats.value_mean[f]) / stats.value_std[f]
    times = (seq.raw_times - stats.time_mean) / stats.time_std
    return TripletSequence(seq.id, times, values, f, seq.raw_times)


def denormalize_values(seq: TripletSequence, stats: NormalizationStats) -> np.ndarray:
    return seq.values * stats.value_std[seq.features] + stats.value_mean[seq.features]


def normalize_dataset(data: Sequence[LabeledSequence], stats: NormalizationStats) -> list[LabeledSequence]:
    return [LabeledSequence(normalize(s.sequence, stats), s.label, s.events) for s in data]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    validation: float = 0.1
    test: float = 0.1
    seed: int = 0
    label_fraction: float = 1.0

    def __post_init__(self):
        fracs = (self.train, self.validation, self.test)
        if any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {fracs}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")


def split(data: Sequence[LabeledSequence], spec: SplitSpec):
    """Deterministic shuffled partition into (train, validation, test)."""
    n = len(data)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.validation * n))
    train = [data[i] for i in order[:n_train]]
    val = [data[i] for i in order[n_train:n_train + n_val]]
    test = [data[i] for i in order[n_train + n_val:]]
    if spec.label_fraction < 1.0:
        train = label_subset(train, spec.label_fraction, spec.seed)
    return train, val, test


def label_subset(data: Sequence[LabeledSequence], fraction: float, seed: int) -> list[LabeledSequence]:
    """Stratified subsample keeping ``fraction`` of each label class (at least one each)."""
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    rng = np.random.default_rng([seed, 1])
    keep: list[int] = []
    labels = np.array([-1 if d.label is None else d.label for d in data])
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        k = max(1, int(round(fraction * len(idx))))
        keep.extend(rng.choice(idx, size=k, replace=False).tolist())
    return [data[i] for i in sorted(keep)]
