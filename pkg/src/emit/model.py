"""Triplet-embedding transformer with mask tokens, attention pooling and two heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import TripletSequence
from .masking import MaskKind
from .numerics import functional as F
from .numerics.nn import Dropout, LayerNorm, Linear, Module
from .numerics.tensor import Parameter, Tensor

CHECKPOINT_FORMAT = 1
NEG_INF = -1e9


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_features: int
    d: int = 50
    m: int = 2
    h_e: int = 4
    d_a: int | None = None
    ffn_hidden: int | None = None
    max_len: int = 880
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.d_a is None:
            object.__setattr__(self, "d_a", 2 * self.d)
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 2 * self.d)
        for name in ("n_features", "d", "h_e", "d_a", "ffn_hidden", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        if self.d < self.h_e:
            raise ValueError(f"d={self.d} leaves no width per head for h_e={self.h_e}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d // self.h_e

    def architecture(self) -> dict:
        """Fields that must agree between a checkpoint and the model loading it."""
        return {k: getattr(self, k) for k in ("n_features", "d", "m", "h_e", "ffn_hidden")}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class Batch:
    """Padded batch; ``valid`` flags real observations."""

    ids: list[str]
    times: np.ndarray
    values: np.ndarray | Tensor
    features: np.ndarray
    valid: np.ndarray
    raw_times: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape


def collate(seqs: Sequence[TripletSequence], max_len: int | None = None, pad_to: int | None = None) -> Batch:
    lengths = [min(len(s), max_len) if max_len else len(s) for s in seqs]
    n = max(max(lengths), pad_to or 0)
    B = len(seqs)
    times = np.zeros((B, n))
    values = np.zeros((B, n))
    raw = np.zeros((B, n))
    feats = np.zeros((B, n), dtype=np.int64)
    valid = np.zeros((B, n), dtype=bool)
    for b, (s, k) in enumerate(zip(seqs, lengths)):
        times[b, :k] = s.times[:k]
        values[b, :k] = s.values[:k]
        raw[b, :k] = s.raw_times[:k]
        feats[b, :k] = s.features[:k]
        valid[b, :k] = True
    return Batch([s.id for s in seqs], times, values, feats, valid, raw)


class ScalarFFN(Module):
    """1 -> hidden (tanh) -> d."""

    def __init__(self, hidden: int, d: int, rng: np.random.Generator):
        self.hidden = Linear(1, hidden, rng)
        self.out = Linear(hidden, d, rng)

    def __call__(self, x) -> Tensor:
        return self.out(F.tanh(self.hidden(x)))


class EncoderBlock(Module):
    """Post-norm transformer block with key-padding mask."""

    def __init__(self, d: int, heads: int, ffn_hidden: int, dropout: float,
                 rng: np.random.Generator, drop_rng: np.random.Generator):
        self.heads = heads
        self.dk = d // heads
        width = heads * self.dk
        self.wq = Linear(d, width, rng)
        self.wk = Linear(d, width, rng)
        self.wv = Linear(d, width, rng)
        self.wo = Linear(width, d, rng)
        self.norm1 = LayerNorm(d)
        self.ff1 = Linear(d, ffn_hidden, rng)
        self.ff2 = Linear(ffn_hidden, d, rng)
        self.norm2 = LayerNorm(d)
        self.drop = Dropout(dropout, drop_rng)

    def _heads(self, x, B, n):
        return x.reshape(B, n, self.heads, self.dk).transpose(0, 2, 1, 3)

    def __call__(self, x, valid: np.ndarray) -> Tensor:
        B, n, _ = x.shape
        q = self._heads(self.wq(x), B, n)
        k = self._heads(self.wk(x), B, n)
        v = self._heads(self.wv(x), B, n)
        scores = F.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(self.dk))
        scores = F.masked_fill(scores, ~valid[:, None, None, :], NEG_INF)
        ctx = F.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, n, self.heads * self.dk)
        x = self.norm1(x + self.drop(self.wo(ctx)))
        return self.norm2(x + self.drop(self.ff2(F.relu(self.ff1(x)))))


class AggregationHead(Module):
    def __init__(self, d: int, d_a: int, rng: np.random.Generator):
        self.W_a = Parameter(rng.uniform(-1, 1, (d_a, d)) / np.sqrt(d))
        self.b_a = Parameter(rng.uniform(-1, 1, d_a) / np.sqrt(d))
        self.u_a = Parameter(rng.uniform(-1, 1, d_a) / np.sqrt(d_a))

    def __call__(self, h, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        if not valid.any(axis=1).all():
            raise ValueError("aggregation needs at least one valid position per sequence")
        hidden = F.tanh(h @ F.transpose(self.W_a) + self.b_a)
        scores = F.matmul(hidden, F.reshape(self.u_a, (-1, 1))).reshape(h.shape[:2])
        alpha = F.softmax(F.masked_fill(scores, ~valid, NEG_INF), axis=-1)
        B, n = valid.shape
        pooled = F.matmul(alpha.reshape(B, 1, n), h).reshape(B, h.shape[2])
        return pooled, alpha


class PredictionHead(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.w_o = Parameter(rng.uniform(-1, 1, d) / np.sqrt(d))
        self.b_o = Parameter(np.zeros(1))

    def logits(self, e_T) -> Tensor:
        return F.matmul(e_T, F.reshape(self.w_o, (-1, 1))).reshape(e_T.shape[0]) + self.b_o

    def __call__(self, e_T) -> Tensor:
        return F.sigmoid(self.logits(e_T))


class EmitModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        d = config.d
        rng = np.random.default_rng([config.seed, 0])
        self.drop_rng = np.random.default_rng([config.seed, 1])
        self.time_ffn = ScalarFFN(d, d, rng)
        self.value_ffn = ScalarFFN(d, d, rng)
        self.feature_embedding = Parameter(rng.normal(0.0, 0.02, (config.n_features, d)))
        self.mask_time = Parameter(rng.normal(0.0, 0.02, d))
        self.mask_value = Parameter(rng.normal(0.0, 0.02, d))
        self.mask_feature = Parameter(rng.normal(0.0, 0.02, d))
        self.blocks = [EncoderBlock(d, config.h_e, config.ffn_hidden, config.dropout, rng, self.drop_rng)
                       for _ in range(config.m)]
        self.aggregation = AggregationHead(d, config.d_a, rng)
        self.head = PredictionHead(d, rng)
        self.forecaster = Linear(d, config.n_features, rng)
        self._name_parameters()

    def _name_parameters(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def param_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def reseed_dropout(self, seed: int) -> None:
        rng = np.random.default_rng([seed, 1])
        self.drop_rng = rng
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def reset_heads(self, seed: int) -> None:
        """Fresh aggregation and prediction heads (used when fine-tuning from a checkpoint)."""
        rng = np.random.default_rng([seed, 2])
        self.aggregation = AggregationHead(self.config.d, self.config.d_a, rng)
        self.head = PredictionHead(self.config.d, rng)
        self._name_parameters()

    # embedding
    def embed_components(self, batch: Batch) -> tuple[Tensor, Tensor, Tensor]:
        B, n = batch.shape
        if batch.features.size and (batch.features.min() < 0 or batch.features.max() >= self.config.n_features):
            raise IndexError("feature index out of range for this model")
        e_t = self.time_ffn(np.asarray(batch.times).reshape(B, n, 1))
        e_x = self.value_ffn(F.reshape(batch.values, (B, n, 1)))
        e_f = F.getitem(self.feature_embedding, batch.features)
        return e_t, e_x, e_f

    def embed(self, batch: Batch) -> Tensor:
        e_t, e_x, e_f = self.embed_components(batch)
        return e_t + e_x + e_f

    def apply_mask_tokens(self, e_t, e_x, e_f, kind: np.ndarray) -> Tensor:
        """Swap component embeddings for mask tokens according to ``kind`` (B, n)."""
        kind = np.asarray(kind)
        is_sum = (kind == MaskKind.SUM)[..., None]
        t = F.where(((kind == MaskKind.TIME)[..., None]) | is_sum, self.mask_time, e_t)
        x = F.where(((kind == MaskKind.VALUE)[..., None]) | is_sum, self.mask_value, e_x)
        f = F.where(((kind == MaskKind.FEATURE)[..., None]) | is_sum, self.mask_feature, e_f)
        return t + x + f

    # encoder and heads
    def encode(self, x, valid: np.ndarray) -> Tensor:
        if x.shape[:2] != valid.shape:
            raise ValueError(f"embeddings {x.shape} do not match validity mask {valid.shape}")
        for block in self.blocks:
            x = block(x, valid)
        return x

    def aggregate(self, h, valid: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.aggregation(h, valid)

    def forecast(self, h_masked) -> Tensor:
        return self.forecaster(h_masked)

    def classify_logits(self, batch: Batch) -> Tensor:
        h = self.encode(self.embed(batch), batch.valid)
        e_T, _ = self.aggregate(h, batch.valid)
        return self.head.logits(e_T)

    def predict_proba(self, seqs: Sequence[TripletSequence], batch_size: int = 64) -> np.ndarray:
        was_training = self.training
        self.eval()
        out = []
        for i in range(0, len(seqs), batch_size):
            batch = collate(seqs[i:i + batch_size], self.config.max_len)
            out.append(F.sigmoid(self.classify_logits(batch)).data.astype(np.float64))
        self.train(was_training)
        return np.concatenate(out) if out else np.zeros(0)

    # checkpoints
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, prefixes: Sequence[str] | None = None) -> None:
        params = self.param_dict()
        for name, p in params.items():
            if prefixes is not None and not name.startswith(tuple(prefixes)):
                continue
            if name not in state:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(value)


def checkpoint_dict(model: EmitModel, extra: dict | None = None) -> dict:
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(model.config),
        "parameters": {
            name: {"shape": list(arr.shape), "values": arr.reshape(-1).astype(np.float64).tolist()}
            for name, arr in model.state_dict().items()
        },
    }
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(model: EmitModel, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra)), encoding="utf-8")


def model_from_checkpoint(doc: dict) -> EmitModel:
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    model = EmitModel(ModelConfig.from_dict(doc["model_config"]))
    model.load_state_dict(parameters_from_checkpoint(doc))
    return model


def parameters_from_checkpoint(doc: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in doc["parameters"].items():
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(entry["shape"])):
            raise CheckpointError(f"{name}: {values.size} values do not fill shape {entry['shape']}")
        out[name] = values.reshape(entry["shape"])
    return out


def load_checkpoint(path) -> tuple[EmitModel, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_checkpoint(doc), doc
