"""Synthetic irregular series with injected rate-of-change events.

Each sequence mixes smooth per-feature baselines sampled at irregular times.
With probability ``event_rate`` it also receives one or more spikes: an extra
observation placed shortly after an existing one of the same feature, raised
by several feature scales. The short gap plus large jump gives a large
rate of change at the preceding observation, and the sequence is labelled 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureVocab, LabeledSequence, TripletSequence
from .masking import rate_of_change


@dataclass(frozen=True)
class SyntheticConfig:
    n_sequences: int = 2000
    n_features: int = 8
    min_obs: int = 40
    max_obs: int = 80
    horizon: float = 48.0
    event_rate: float = 0.5
    max_spikes: int = 3
    spike_jump: tuple[float, float] = (4.0, 6.0)
    spike_gap: tuple[float, float] = (0.05, 0.25)
    noise: float = 0.1
    spike_floor: float = 10.0

    def __post_init__(self):
        if self.n_sequences < 1 or self.n_features < 1:
            raise ValueError("need at least one sequence and one feature")
        if not 1 <= self.min_obs <= self.max_obs:
            raise ValueError("observation range must satisfy 1 <= min_obs <= max_obs")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")


def synthetic_vocab(n_features: int) -> FeatureVocab:
    return FeatureVocab(tuple(f"x{i}" for i in range(n_features)))


def _feature_profile(rng: np.random.Generator, n_features: int):
    # dataset-level scale/level per feature so raw units differ across features
    level = rng.uniform(-20.0, 20.0, n_features)
    scale = rng.uniform(1.0, 4.0, n_features)
    period = rng.uniform(12.0, 36.0, n_features)
    return level, scale, period


def generate_synthetic(config: SyntheticConfig, seed: int) -> list[LabeledSequence]:
    """Deterministic in ``(config, seed)``; positive sequences list their event positions."""
    root = np.random.SeedSequence(seed)
    profile_seed, *seq_seeds = root.spawn(config.n_sequences + 1)
    level, scale, period = _feature_profile(np.random.default_rng(profile_seed), config.n_features)

    out = []
    for j, ss in enumerate(seq_seeds):
        rng = np.random.default_rng(ss)
        out.append(_one_sequence(f"s{j:05d}", rng, config, level, scale, period))
    return out


def _one_sequence(seq_id, rng, config, level, scale, period) -> LabeledSequence:
    F = config.n_features
    n = int(rng.integers(config.min_obs, config.max_obs + 1))
    positive = bool(rng.random() < config.event_rate)
    n_spikes = int(rng.integers(1, config.max_spikes + 1)) if positive else 0
    n_base = max(n - n_spikes, 1)

    times = np.sort(rng.uniform(0.0, config.horizon, n_base))
    feats = rng.integers(0, F, n_base)
    offset = rng.normal(0.0, 1.0, F)
    phase = rng.uniform(0.0, 2 * np.pi, F)
    amp = rng.uniform(0.3, 1.0, F)

    def baseline(t, f):
        return level[f] + scale[f] * (offset[f] + amp[f] * np.sin(2 * np.pi * t / period[f] + phase[f]))

    noise = np.clip(rng.normal(0.0, config.noise, n_base), -3 * config.noise, 3 * config.noise)
    values = baseline(times, feats) + scale[feats] * noise

    spike_t, spike_x, spike_f = [], [], []
    anchors = []
    for _ in range(n_spikes):
        for _attempt in range(20):
            k = int(rng.integers(0, n_base))
            f = feats[k]
            same = np.flatnonzero(feats == f)
            later = times[same][times[same] > times[k]]
            room = (later[0] if len(later) else config.horizon) - times[k]
            # only anchor on the last observation of its timestamp within the feature
            if room <= 0 or np.any((times[same] == times[k]) & (same > k)) or k in anchors:
                continue
            gap = min(rng.uniform(*config.spike_gap), room / 2)
            jump = rng.uniform(*config.spike_jump) * scale[f] * rng.choice([-1.0, 1.0])
            spike_t.append(times[k] + gap)
            spike_x.append(values[k] + jump)
            spike_f.append(f)
            anchors.append(k)
            break

    all_t = np.concatenate([times, spike_t])
    all_x = np.concatenate([values, spike_x])
    all_f = np.concatenate([feats, np.asarray(spike_f, dtype=np.int64)]).astype(np.int64)
    is_anchor = np.zeros(len(all_t), dtype=bool)
    is_anchor[anchors] = True
    order = np.argsort(all_t, kind="stable")
    all_t, all_x, all_f, is_anchor = all_t[order], all_x[order], all_f[order], is_anchor[order]

    events = []
    for pos in np.flatnonzero(is_anchor):
        idx = np.flatnonzero(all_f == all_f[pos])
        r = rate_of_change(all_x[idx], all_t[idx])
        if abs(r[np.searchsorted(idx, pos)]) > config.spike_floor:
            events.append(int(pos))
    # positives whose spike could not be placed fall back to label 0
    label = 1 if events else 0
    seq = TripletSequence(seq_id, all_t, all_x, all_f)
    return LabeledSequence(seq, label, tuple(events))
