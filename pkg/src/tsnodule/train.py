"""Mini-batch Adam training with validation early stopping, and evaluation."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .augment import GROUP
from .cohort import StudySet
from .features import FeatureCache
from .layers import AdamState, adam_step, bce_with_logits
from .metrics import MetricsReport, f1_score, metrics_report
from .model import TwoStreamModel, classify
from .rng import rng_for


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    lr: float = 1e-4
    batch_size: int = 32
    dropout: float = 0.3
    patience: int = 10
    seed: int = 0
    deterministic: bool = True
    freeze_backbone: bool = False
    augment: bool = True
    overfit_probe: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (head batch norm)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0 <= self.patience < self.epochs:
            raise ValueError("patience must be non-negative and smaller than epochs")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    stopped_epoch: int
    params: dict = field(repr=False, default_factory=dict)


class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly lower validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss``; True if it is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Consecutive batches; a trailing singleton joins the previous batch."""
    if n < 2:
        raise ValueError("training needs at least 2 samples")
    cuts = list(range(0, n, batch_size)) + [n]
    if cuts[-1] - cuts[-2] < 2:
        del cuts[-2]
    return [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]


def default_time(model: TwoStreamModel, time: str | None) -> str:
    if time is None:
        if model.streams != 2:
            raise ValueError("single_stream models need an explicit time ('t1' or 't2')")
        return "t1t2"
    if (time == "t1t2") != (model.streams == 2):
        raise ValueError(f"time {time!r} does not fit a {model.mode} model")
    return time


def _times(time: str) -> tuple[str, ...]:
    return ("t1", "t2") if time == "t1t2" else (time,)


def deterministic_scope(enabled: bool):
    return threadpool_limits(limits=1) if enabled else contextlib.nullcontext()


def _logits(model, data: StudySet, time, rows, sym, train, dropout_stream, cache, freeze, update_stats=True):
    """Forward a batch; returns ``(logits, backward_fn)``."""
    if cache is not None:
        h = cache.get(model.tap, [data.ids[i] for i in rows], _times(time), sym).astype(model.head["head.fc1.w"].dtype)
        logits, hc = model.head_forward(h, train, dropout_stream, update_stats)
        return logits, lambda g: model.head_backward(hc, g)[0]
    streams = data.streams(time, rows)
    if any(s != 0 for s in sym):
        streams = [np.stack([GROUP[g].apply(x) for g, x in zip(sym, s)]) for s in streams]
    logits, c = model.forward(streams, train, dropout_stream, freeze, update_stats)
    return logits, lambda g: model.backward(c, g, freeze)


def predict_proba(model: TwoStreamModel, data: StudySet, time: str | None = None,
                  cache: FeatureCache | None = None, batch_size: int = 32) -> np.ndarray:
    """Eval-mode malignancy probabilities, one un-augmented pass per study."""
    time = default_time(model, time)
    if len(data) == 0:
        raise ValueError("cannot predict on an empty dataset")
    out = []
    for start in range(0, len(data), batch_size):
        rows = np.arange(start, min(start + batch_size, len(data)))
        z, _ = _logits(model, data, time, rows, np.zeros(len(rows), np.int64), False, (0,), cache,
                       True, update_stats=False)
        out.append(z)
    return classify(np.concatenate(out))[0]


def evaluate(model: TwoStreamModel, data: StudySet, time: str | None = None, threshold: float = 0.5,
             cache: FeatureCache | None = None) -> MetricsReport:
    return metrics_report(predict_proba(model, data, time, cache), data.labels, threshold)


def _val_loss(model, data, time, cache):
    p_logit = []
    for start in range(0, len(data), 32):
        rows = np.arange(start, min(start + 32, len(data)))
        z, _ = _logits(model, data, time, rows, np.zeros(len(rows), np.int64), False, (0,), cache, True, False)
        p_logit.append(z)
    z = np.concatenate(p_logit)
    loss, _ = bce_with_logits(z, data.labels)
    return loss, f1_score(data.labels, classify(z)[1])


def train(model: TwoStreamModel, train_set: StudySet, val_set: StudySet | None, cfg: TrainConfig,
          time: str | None = None, cache: FeatureCache | None = None, on_epoch_end=None) -> TrainResult:
    """Train in place and restore the best-validation-loss parameters.

    With ``val_set=None`` the run lasts exactly ``cfg.epochs`` epochs. A
    ``cache`` (frozen backbone only) replaces backbone passes with lookups.
    """
    time = default_time(model, time)
    if len(train_set) < 2:
        raise ValueError("training set needs at least 2 studies")
    if val_set is not None:
        if len(val_set) == 0:
            raise ValueError("validation set is empty")
        overlap = set(train_set.ids) & set(val_set.ids)
        if overlap and not cfg.overfit_probe:
            raise ValueError(f"train and validation sets share {len(overlap)} studies, e.g. {sorted(overlap)[:3]}")
    if cache is not None:
        if not cfg.freeze_backbone:
            raise ValueError("a feature cache requires freeze_backbone")
        cache.check(model.backbone)
    model.head_cfg = dataclasses.replace(model.head_cfg, dropout_rate=cfg.dropout)
    params = model.parameters()
    names = model.trainable_names(cfg.freeze_backbone)
    adam = AdamState(lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    best = {k: v.copy() for k, v in params.items()}
    history: list[EpochRecord] = []
    n = len(train_set)
    with deterministic_scope(cfg.deterministic):
        for epoch in range(1, cfg.epochs + 1):
            order = rng_for(cfg.seed, "shuffle", epoch).permutation(n)
            sym = (rng_for(cfg.seed, "augment", epoch).integers(len(GROUP), size=n) if cfg.augment
                   else np.zeros(n, np.int64))
            total = 0.0
            for b, sl in enumerate(batch_slices(n, cfg.batch_size)):
                rows = order[sl]
                z, back = _logits(model, train_set, time, rows, sym[rows], True, (cfg.seed, epoch, b), cache,
                                  cfg.freeze_backbone)
                loss, g = bce_with_logits(z, train_set.labels[rows])
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = back(g)
                adam_step(params, {k: grads[k] for k in names}, adam)
                total += loss * len(rows)
            train_loss = total / n
            if val_set is None:
                val_loss, val_f1 = math.nan, math.nan
            else:
                val_loss, val_f1 = _val_loss(model, val_set, time, cache)
            rec = EpochRecord(epoch, train_loss, val_loss, val_f1)
            history.append(rec)
            if on_epoch_end is not None:
                on_epoch_end(rec)
            if val_set is None:
                continue
            if stopper.update(epoch, val_loss):
                best = {k: v.copy() for k, v in params.items()}
            if cfg.overfit_probe and val_f1 == 1.0:
                # the probe keeps the weights that memorized the set
                best = {k: v.copy() for k, v in params.items()}
                stopper.best_epoch = epoch
                break
            if stopper.should_stop:
                break
    if val_set is None:
        best_epoch = len(history)
    else:
        best_epoch = stopper.best_epoch
        for k, v in params.items():
            np.copyto(v, best[k])
    return TrainResult(history, best_epoch, len(history), {k: v.copy() for k, v in params.items()})


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_f1)])
