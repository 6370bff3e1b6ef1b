"""Masked latent reconstruction + forecasting pretraining, and classification fine-tuning."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import LabeledSequence, TripletSequence, label_subset
from .masking import MaskConfig, MaskPlan, make_plan, matched_random_rate, significance
from .metrics import roc_auc
from .model import Batch, EmitModel, ModelConfig, checkpoint_dict, collate, parameters_from_checkpoint
from .numerics import functional as F
from .numerics.optim import AdamState, adam_step
from .numerics.tensor import Tape, Tensor

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    lam: float = 1.0
    mask: MaskConfig = field(default_factory=MaskConfig)
    batch_size: int = 128
    lr: float = 5e-4
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 0.0
    horizon: float = 2.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.horizon <= 0:
            raise ValueError("forecast horizon must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 32
    lr: float = 5e-5
    dropout: float = 0.2
    weight_decay: float = 0.0
    label_fraction: float = 1.0
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.label_fraction <= 1:
            raise ValueError("label_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience >= 0")


@dataclass
class TrainReport:
    stage: str
    monitor: str
    mode: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_value: float | None = None
    stop_reason: str = ""
    config: dict = field(default_factory=dict)
    wall_time: float = field(default=0.0, compare=False)
    epoch_seconds: list[float] = field(default_factory=list, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    def to_json(self) -> dict:
        out = asdict(self)
        out["epochs_run"] = self.epochs_run
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TrainReport":
        obj = {k: v for k, v in obj.items() if k != "epochs_run"}
        return cls(**obj)


@dataclass
class ForecastTarget:
    values: np.ndarray
    indicator: np.ndarray


# ---------------------------------------------------------------------------
# losses

def recon_loss(outputs, targets) -> Tensor:
    """Mean over masked positions of the per-dimension squared error.

    ``targets`` are treated as constants; pass detached embeddings.
    """
    outputs = outputs if isinstance(outputs, Tensor) else Tensor(outputs)
    targets = targets.detach() if isinstance(targets, Tensor) else Tensor(targets)
    if outputs.shape != targets.shape:
        raise ValueError(f"recon_loss: outputs {outputs.shape} vs targets {targets.shape}")
    if outputs.shape[0] == 0:
        return Tensor(0.0)
    diff = outputs - targets
    return F.mean(diff * diff)


def forecast_loss(predictions, target: ForecastTarget) -> Tensor:
    """Squared error averaged over (position, feature) pairs whose indicator is set."""
    predictions = predictions if isinstance(predictions, Tensor) else Tensor(predictions)
    if predictions.shape != target.values.shape or target.indicator.shape != target.values.shape:
        raise ValueError(
            f"forecast_loss: predictions {predictions.shape}, targets {target.values.shape}, "
            f"indicator {target.indicator.shape}"
        )
    count = float(np.sum(target.indicator))
    if count == 0:
        return Tensor(0.0)
    diff = (predictions - target.values) * target.indicator
    return F.scale(F.sum(diff * diff), 1.0 / count)


def total_loss(recon, forecast, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return forecast + recon * lam


# ---------------------------------------------------------------------------
# forecast targets

def forecast_table(seq: TripletSequence, horizon: float, n_features: int) -> ForecastTarget:
    """Next value of every feature in ``(t_i, t_i + horizon]`` for every position ``i``."""
    n = len(seq)
    values = np.zeros((n, n_features))
    indicator = np.zeros((n, n_features))
    t = seq.raw_times
    for f in range(n_features):
        idx = np.flatnonzero(seq.features == f)
        if not len(idx):
            continue
        tf = t[idx]
        nxt = np.searchsorted(tf, t, side="right")
        ok = nxt < len(idx)
        ok[ok] &= tf[nxt[ok]] <= t[ok] + horizon
        values[ok, f] = seq.values[idx[nxt[ok]]]
        indicator[ok, f] = 1.0
    return ForecastTarget(values, indicator)


def build_forecast_targets(seq: TripletSequence, plan: MaskPlan, horizon: float,
                           n_features: int) -> ForecastTarget:
    table = forecast_table(seq, horizon, n_features)
    rows = np.flatnonzero(plan.masked)
    return ForecastTarget(table.values[rows], table.indicator[rows])


# ---------------------------------------------------------------------------
# pretraining

@dataclass
class _Prepared:
    seq: TripletSequence
    sig: np.ndarray
    table: ForecastTarget


def _prepare(seqs: Sequence[TripletSequence], config: PretrainConfig, n_features: int, max_len: int):
    out = []
    for s in seqs:
        if len(s) > max_len:
            s = TripletSequence(s.id, s.times[:max_len], s.values[:max_len], s.features[:max_len],
                                s.raw_times[:max_len])
        out.append(_Prepared(s, significance(s, config.mask.theta),
                             forecast_table(s, config.horizon, n_features)))
    return out


def _sequences(data) -> list[TripletSequence]:
    return [d.sequence if isinstance(d, LabeledSequence) else d for d in data]


@dataclass
class PretrainOutput:
    recon: Tensor
    forecast: Tensor
    total: Tensor
    n_masked: int
    n_forecast: int


def pretrain_losses(model: EmitModel, batch: Batch, kinds: np.ndarray, targets: ForecastTarget,
                    lam: float, recon_target: np.ndarray | None = None) -> PretrainOutput:
    """All pretraining losses for one padded batch.

    ``kinds`` is the (B, n) mask-kind array; ``targets`` holds forecast rows for
    masked positions in row-major (batch, position) order. ``recon_target``
    optionally pins the (B, n, d) reconstruction target; by default it is this
    pass's unmasked embedding, detached. Pinning it lets finite differences see
    the same function the stop-gradient defines.
    """
    B, n = batch.shape
    d = model.config.d
    e_t, e_x, e_f = model.embed_components(batch)
    original = (e_t + e_x + e_f).data if recon_target is None else np.asarray(recon_target)
    masked_input = model.apply_mask_tokens(e_t, e_x, e_f, kinds)
    h = model.encode(masked_input, batch.valid)
    rows = np.flatnonzero(kinds.reshape(-1) != 0)
    h_masked = F.getitem(h.reshape(B * n, d), rows)
    recon = recon_loss(h_masked, Tensor(original.reshape(B * n, d)[rows]))
    fc = forecast_loss(model.forecast(h_masked), targets)
    return PretrainOutput(recon, fc, total_loss(recon, fc, lam), len(rows), int(targets.indicator.sum()))


def _pretrain_batch(model: EmitModel, items: Sequence[_Prepared], mask_cfg: MaskConfig, epoch: int,
                    lam: float) -> PretrainOutput:
    batch = collate([it.seq for it in items])
    B, n = batch.shape
    kinds = np.zeros((B, n), dtype=np.int8)
    values, indicator = [], []
    for b, it in enumerate(items):
        plan = make_plan(it.seq, mask_cfg, epoch, it.sig)
        kinds[b, :len(plan)] = plan.kind
        rows = np.flatnonzero(plan.masked)
        values.append(it.table.values[rows])
        indicator.append(it.table.indicator[rows])
    targets = ForecastTarget(np.concatenate(values), np.concatenate(indicator))
    return pretrain_losses(model, batch, kinds, targets, lam)


class _LossMeter:
    """Dataset-level means: recon weighted by masked positions, forecast by indicated pairs."""

    def __init__(self, lam: float):
        self.lam = lam
        self.recon = self.forecast = 0.0
        self.n_masked = self.n_forecast = 0

    def add(self, out: PretrainOutput) -> None:
        self.recon += out.recon.item() * out.n_masked
        self.n_masked += out.n_masked
        self.forecast += out.forecast.item() * out.n_forecast
        self.n_forecast += out.n_forecast

    def result(self) -> dict:
        recon = self.recon / self.n_masked if self.n_masked else 0.0
        fc = self.forecast / self.n_forecast if self.n_forecast else 0.0
        return {"recon": recon, "forecast": fc, "total": fc + self.lam * recon,
                "masked_positions": self.n_masked}


def resolve_mask_config(train, config: PretrainConfig) -> PretrainConfig:
    """Fill a missing random-mask rate with the event mask's expected rate on ``train``."""
    mask = config.mask
    if mask.variant == "random" and mask.random_rate is None:
        rate = matched_random_rate(train, mask.theta, mask.alpha_mask)
        mask = MaskConfig(mask.theta, mask.alpha_mask, mask.variant, rate, mask.seed)
        config = PretrainConfig(**{**_shallow(config), "mask": mask})
    return config


def _shallow(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


def validation_mask(mask: MaskConfig) -> MaskConfig:
    """Validation masks get their own seed and a fixed epoch key so they never change."""
    return MaskConfig(mask.theta, mask.alpha_mask, mask.variant, mask.random_rate, mask.seed + 1)


def _evaluate_items(model: EmitModel, items, mask: MaskConfig, lam: float, batch_size: int) -> dict:
    was_training = model.training
    model.eval()
    meter = _LossMeter(lam)
    for i in range(0, len(items), batch_size):
        meter.add(_pretrain_batch(model, items[i:i + batch_size], mask, 0, lam))
    model.train(was_training)
    return meter.result()


def evaluate_pretrain(model: EmitModel, data, config: PretrainConfig, train=None) -> dict:
    """Validation pretraining losses exactly as :func:`pretrain` computes them.

    ``train`` is needed only to resolve a budget-matched random-mask rate.
    """
    config = resolve_mask_config(_sequences(train if train is not None else data), config)
    items = _prepare(_sequences(data), config, model.config.n_features, model.config.max_len)
    return _evaluate_items(model, items, validation_mask(config.mask), config.lam, config.batch_size)


def pretrain(train, validation, model: EmitModel, config: PretrainConfig,
             progress: Callable[[dict], None] | None = None) -> tuple[TrainReport, dict]:
    """Train ``model`` in place; on return it holds the best-validation weights.

    Returns the report and a checkpoint document for the best epoch.
    """
    train_seqs, val_seqs = _sequences(train), _sequences(validation)
    if not train_seqs:
        raise TrainingError("empty training split")
    if not val_seqs:
        raise TrainingError("empty validation split")
    config = resolve_mask_config(train_seqs, config)
    n_features, max_len = model.config.n_features, model.config.max_len
    train_items = _prepare(train_seqs, config, n_features, max_len)
    val_items = _prepare(val_seqs, config, n_features, max_len)
    val_mask = validation_mask(config.mask)

    params = model.param_dict()
    state = AdamState.init(params, lr=config.lr, weight_decay=config.weight_decay)
    model.reseed_dropout(config.seed)
    report = TrainReport("pretrain", "validation.total", "min", config=_config_snapshot(config, model))
    best_state = copy.deepcopy(model.state_dict())
    best = np.inf
    wait = 0
    started = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_items))
        meter = _LossMeter(config.lam)
        skipped = 0
        for i in range(0, len(order), config.batch_size):
            items = [train_items[j] for j in order[i:i + config.batch_size]]
            model.zero_grad()
            with Tape() as tape:
                out = _pretrain_batch(model, items, config.mask, epoch, config.lam)
            if out.n_masked == 0:
                skipped += 1
                continue
            tape.backward(out.total)
            adam_step(params, state)
            meter.add(out)
        if skipped:
            logger.info("epoch %d: %d batches had no masked positions", epoch, skipped)

        val_result = _evaluate_items(model, val_items, val_mask, config.lam, config.batch_size)
        record = {"epoch": epoch, "train": meter.result(), "validation": val_result,
                  "skipped_batches": skipped}
        report.epochs.append(record)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if progress:
            progress(record)

        current = record["validation"]["total"]
        if current < best - config.min_delta:
            best, wait = current, 0
            report.best_epoch, report.best_value = epoch, current
            best_state = copy.deepcopy(model.state_dict())
        else:
            wait += 1
            if wait >= max(config.patience, 1):
                report.stop_reason = "early_stopping"
                break
    else:
        report.stop_reason = "max_epochs"

    model.load_state_dict(best_state)
    model.eval()
    report.wall_time = time.perf_counter() - started
    return report, checkpoint_dict(model)


def _config_snapshot(config, model: EmitModel) -> dict:
    snap = asdict(config)
    snap["model"] = asdict(model.config)
    return snap


# ---------------------------------------------------------------------------
# fine-tuning

def _labels(data) -> np.ndarray:
    labels = [d.label for d in data]
    if any(lab is None for lab in labels):
        raise TrainingError("fine-tuning needs labelled sequences")
    return np.asarray(labels, dtype=np.float64)


def build_finetune_model(model_config: ModelConfig | None, checkpoint: dict | None,
                         config: FinetuneConfig) -> EmitModel:
    """Pretrained encoder/embedder with fresh heads, or a from-scratch model."""
    if checkpoint is None:
        if model_config is None:
            raise TrainingError("from-scratch fine-tuning needs a model config")
        cfg = ModelConfig.from_dict({**asdict(model_config), "dropout": config.dropout})
        return EmitModel(cfg)
    ckpt_cfg = ModelConfig.from_dict(checkpoint["model_config"])
    if model_config is not None and model_config.architecture() != ckpt_cfg.architecture():
        raise TrainingError(
            f"model config {model_config.architecture()} does not match checkpoint {ckpt_cfg.architecture()}"
        )
    model = EmitModel(ModelConfig.from_dict({**asdict(ckpt_cfg), "dropout": config.dropout}))
    model.load_state_dict(parameters_from_checkpoint(checkpoint))
    model.reset_heads(config.seed)
    return model


def classification_loss(model: EmitModel, seqs: Sequence[TripletSequence], labels: np.ndarray) -> Tensor:
    batch = collate(seqs, model.config.max_len)
    return F.bce_with_logits(model.classify_logits(batch), labels)


def finetune(train, validation, config: FinetuneConfig, model_config: ModelConfig | None = None,
             checkpoint: dict | None = None,
             progress: Callable[[dict], None] | None = None) -> tuple[TrainReport, EmitModel]:
    """Binary classification training with early stopping on validation ROC-AUC.

    ``checkpoint=None`` trains from scratch. The returned model holds the best
    epoch's weights.
    """
    if config.label_fraction < 1.0:
        train = label_subset(list(train), config.label_fraction, config.seed)
    if not train:
        raise TrainingError("empty training split")
    train_seqs, train_y = _sequences(train), _labels(train)
    val_seqs, val_y = _sequences(validation), _labels(validation)
    model = build_finetune_model(model_config, checkpoint, config)
    params = model.param_dict()
    state = AdamState.init(params, lr=config.lr, weight_decay=config.weight_decay)
    model.reseed_dropout(config.seed)
    two_class = len(np.unique(val_y)) == 2
    report = TrainReport("finetune", "validation.roc_auc" if two_class else "validation.loss",
                         "max" if two_class else "min", config=_config_snapshot(config, model))
    report.config["train_size"] = len(train_seqs)
    report.config["from_scratch"] = checkpoint is None
    best = -np.inf
    best_state = copy.deepcopy(model.state_dict())
    wait = 0
    started = time.perf_counter()

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_seqs))
        total, count = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            model.zero_grad()
            with Tape() as tape:
                loss = classification_loss(model, [train_seqs[j] for j in idx], train_y[idx])
            tape.backward(loss)
            adam_step(params, state)
            total += loss.item() * len(idx)
            count += len(idx)

        val_metrics = evaluate_classifier(model, val_seqs, val_y)
        record = {"epoch": epoch, "train": {"loss": total / count}, "validation": val_metrics}
        report.epochs.append(record)
        report.epoch_seconds.append(time.perf_counter() - t0)
        if progress:
            progress(record)

        current = val_metrics["roc_auc"] if two_class else -val_metrics["loss"]
        if current > best:
            best, wait = current, 0
            report.best_epoch = epoch
            report.best_value = val_metrics["roc_auc"] if two_class else val_metrics["loss"]
            best_state = copy.deepcopy(model.state_dict())
        else:
            wait += 1
            if wait >= max(config.patience, 1):
                report.stop_reason = "early_stopping"
                break
    else:
        report.stop_reason = "max_epochs"

    model.load_state_dict(best_state)
    model.eval()
    report.wall_time = time.perf_counter() - started
    return report, model


def evaluate_classifier(model: EmitModel, seqs: Sequence[TripletSequence], labels: np.ndarray,
                        batch_size: int = 128) -> dict:
    was_training = model.training
    model.eval()
    logits = []
    for i in range(0, len(seqs), batch_size):
        batch = collate(seqs[i:i + batch_size], model.config.max_len)
        logits.append(model.classify_logits(batch).data.astype(np.float64))
    model.train(was_training)
    z = np.concatenate(logits)
    loss = float(np.mean(np.maximum(z, 0) - z * labels + np.log1p(np.exp(-np.abs(z)))))
    out = {"loss": loss}
    if len(np.unique(labels)) == 2:
        out["roc_auc"] = roc_auc(z, labels)
    return out
