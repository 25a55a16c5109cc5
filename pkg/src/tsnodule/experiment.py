"""Stratified cross-validation and the T1 / T2 / T1T2 comparison matrix."""
from __future__ import annotations

import dataclasses
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backbone import TAPS, Backbone, BackboneConfig, TapPoint, build_backbone
from .cohort import StudySet
from .features import FeatureCache
from .metrics import MetricsReport
from .model import HeadConfig, TwoStreamModel, build_model
from .rng import rng_for
from .splits import stratified_kfold, stratified_split
from .train import TrainConfig, evaluate, train

# (row label, time-point, model mode)
MODELS = (("3DCNN", "t1", "single_stream"), ("3DCNN", "t2", "single_stream"), ("TS-3DCNN", "t1t2", "two_stream"))


@dataclass(frozen=True)
class ModelSpec:
    tap: TapPoint
    time: str
    backbone: BackboneConfig = field(default_factory=BackboneConfig.tiny)
    hidden_units: int = 64

    @property
    def mode(self) -> str:
        return "two_stream" if self.time == "t1t2" else "single_stream"


def derive_seed(seed: int, tag: str, *counters: int) -> int:
    return int(rng_for(seed, tag, *counters).integers(2 ** 31))


def make_model(spec: ModelSpec, seed: int, base: Backbone | None, dropout: float) -> TwoStreamModel:
    return build_model(spec.backbone, spec.tap, HeadConfig(spec.hidden_units, dropout), spec.mode, seed,
                       backbone=base)


def format_pm(mean: float, sd: float) -> str:
    return f"{mean:.3f} ± {sd:.2f}"


@dataclass
class FoldResult:
    fold: int
    train_f1: float
    val_f1: float
    best_epoch: int


@dataclass
class CVResult:
    folds: list[FoldResult]

    def _stat(self, attr):
        values = [getattr(f, attr) for f in sorted(self.folds, key=lambda f: f.fold)]
        return statistics.fmean(values), statistics.pstdev(values)

    @property
    def train_f1(self) -> tuple[float, float]:
        return self._stat("train_f1")

    @property
    def val_f1(self) -> tuple[float, float]:
        return self._stat("val_f1")

    @property
    def median_best_epoch(self) -> int:
        return max(1, int(round(statistics.median(f.best_epoch for f in self.folds))))


def _fit(spec, data_train, data_val, cfg, seed, base, cache):
    model = make_model(spec, seed, base, cfg.dropout)
    result = train(model, data_train, data_val, cfg, spec.time, cache)
    return model, result


def cross_validate(data: StudySet, spec: ModelSpec, cfg: TrainConfig, k: int = 10, fold_seed: int = 0,
                   base: Backbone | None = None, cache: FeatureCache | None = None, workers: int = 1) -> CVResult:
    """Train on k-1 folds, validate on the held-out one, for every fold."""
    plan = stratified_kfold(data.ids, data.labels, k, fold_seed)

    def run(i):
        fold_cfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, "fold-train", i))
        tr, va = data.subset(plan.train_ids(i)), data.subset(plan.folds[i])
        model, res = _fit(spec, tr, va, fold_cfg, derive_seed(cfg.seed, "fold-init", i), base, cache)
        return FoldResult(i, evaluate(model, tr, spec.time, cache=cache).f1,
                          evaluate(model, va, spec.time, cache=cache).f1, res.best_epoch)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            folds = list(pool.map(run, range(k)))
    else:
        folds = [run(i) for i in range(k)]
    return CVResult(sorted(folds, key=lambda f: f.fold))


@dataclass
class ExperimentRow:
    model: str
    time: str
    tap: TapPoint
    train_f1_mean: float
    train_f1_sd: float
    val_f1_mean: float
    val_f1_sd: float
    test: MetricsReport | None = None
    median_epochs: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig.tiny)
    backbone_seed: int = 0
    split_fraction: float = 0.7
    kfolds: int = 10
    seed: int = 0
    workers: int = 1


def select_tap(rows: list[ExperimentRow]) -> ExperimentRow:
    """Highest mean validation F1; ties go to the deeper tap."""
    return max(rows, key=lambda r: (r.val_f1_mean, TAPS.index(r.tap)))


@dataclass
class ExperimentResult:
    rows: list[ExperimentRow]
    best: list[ExperimentRow]
    table: str


def experiment_matrix(data: StudySet, taps, cfg: ExperimentConfig, base: Backbone | None = None,
                      cache: FeatureCache | None = None) -> ExperimentResult:
    """Cross-validate every (time, tap), keep the best tap per time, retrain and test it."""
    taps = [TapPoint.parse(t) for t in taps]
    if base is None:
        base = build_backbone(cfg.backbone, cfg.backbone_seed)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    if tcfg.freeze_backbone and cache is None:
        cache = FeatureCache(base, data, taps)
    split = stratified_split(data.ids, data.labels, cfg.split_fraction, derive_seed(cfg.seed, "split"))
    train_set, test_set = data.subset(split.train_ids), data.subset(split.test_ids)
    rows, best = [], []
    for m, (name, time, _) in enumerate(MODELS):
        mode_rows = []
        for tap in taps:
            spec = ModelSpec(tap, time, cfg.backbone)
            cv = cross_validate(train_set, spec, dataclasses.replace(tcfg, seed=derive_seed(cfg.seed, "cv", m)),
                                cfg.kfolds, derive_seed(cfg.seed, "folds"), base, cache, cfg.workers)
            row = ExperimentRow(name, time, tap, *cv.train_f1, *cv.val_f1, median_epochs=cv.median_best_epoch)
            mode_rows.append(row)
        winner = select_tap(mode_rows)
        epochs = winner.median_epochs
        final_cfg = dataclasses.replace(tcfg, seed=derive_seed(cfg.seed, "final", m), epochs=epochs,
                                        patience=min(tcfg.patience, epochs - 1))
        spec = ModelSpec(winner.tap, time, cfg.backbone)
        model, _ = _fit(spec, train_set, None, final_cfg, derive_seed(cfg.seed, "final-init", m), base, cache)
        winner.test = evaluate(model, test_set, time, cache=cache)
        rows += mode_rows
        best.append(winner)
    return ExperimentResult(rows, best, render_table(best))


def render_table(rows: list[ExperimentRow]) -> str:
    head = "| Model | Time | Feats | Train (F1) | Val (F1) | F1 | Prec | Rec |"
    lines = [head, "|" + "---|" * 8]
    for r in rows:
        t = r.test
        lines.append(f"| {r.model} | {r.time.upper()} | {r.tap} | {format_pm(r.train_f1_mean, r.train_f1_sd)} | "
                     f"{format_pm(r.val_f1_mean, r.val_f1_sd)} | {t.f1:.3f} | {t.precision:.3f} | {t.recall:.3f} |")
    return "\n".join(lines)
