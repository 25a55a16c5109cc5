"""Command-line entry point: ``python -m tsnodule <command> ...``.

Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import TapPoint, build_backbone, load_backbone_weights
from .checkpoint import inspect_checkpoint, load_checkpoint, load_parameters, save_checkpoint
from .cohort import StudySet, load_study_set, read_manifest, study_patches, write_cohort
from .config import MODES, RunConfig, config_from_dict, config_to_dict, parse_config
from .errors import ConfigError, FormatError
from .experiment import ExperimentConfig, ModelSpec, cross_validate, derive_seed, experiment_matrix, format_pm
from .features import FeatureCache
from .gradcheck import format_reports, run_suite
from .metrics import write_metrics, write_roc_csv
from .model import HeadConfig, build_model
from .splits import stratified_kfold, stratified_split
from .train import evaluate, predict_proba, train, write_history


THRESHOLD = 0.5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if getattr(args, "config", None) else RunConfig()
    model = {}
    if getattr(args, "mode", None):
        model["mode"] = args.mode
    if getattr(args, "tap", None):
        model["tap"] = args.tap
    if model:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **model))
    if getattr(args, "epochs", None) is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, epochs=args.epochs,
                                                                 patience=min(cfg.train.patience, args.epochs - 1)))
    return cfg


def _data_path(args, cfg: RunConfig) -> str:
    path = getattr(args, "data", None) or cfg.data.cohort_path
    if not path:
        raise UsageError("no cohort given (use --data or data.cohort_path)")
    return path


def _split(data, cfg: RunConfig):
    plan = stratified_split(data.ids, data.labels, cfg.data.split_fraction, cfg.data.split_seed)
    return data.subset(plan.train_ids), data.subset(plan.test_ids)


def _base_backbone(cfg: RunConfig):
    base = build_backbone(cfg.model.backbone, cfg.model.backbone_seed)
    if cfg.model.backbone_ckpt:
        load_backbone_weights(base, cfg.model.backbone_ckpt, strict=True)
    return base


def _model_from_config(cfg: RunConfig, base=None):
    mc = cfg.model
    return build_model(mc.backbone, mc.tap, HeadConfig(mc.hidden_units, cfg.train.dropout), MODES[mc.mode],
                       derive_seed(cfg.train.seed, "init"), backbone=base if base is not None else _base_backbone(cfg))


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    try:
        cfg = config_from_dict(ckpt.config)
    except ConfigError as exc:
        raise FormatError(f"{path}: checkpoint config echo is unusable: {exc}") from exc
    model = _model_from_config(dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, backbone_ckpt=None)))
    load_parameters(model.parameters(), ckpt, strict=True)
    return model, cfg


def cmd_synth(args):
    cfg = parse_config(args.config).synth if args.config else RunConfig().synth
    over = {k: v for k, v in (("seed", args.seed), ("n_studies", args.n_studies),
                              ("n_malignant", args.n_malignant)) if v is not None}
    try:
        cfg = dataclasses.replace(cfg, **over)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    index = write_cohort(args.out, cfg)
    print(f"wrote {cfg.n_studies} studies ({cfg.n_malignant} malignant) to {index}")


def cmd_train(args):
    cfg = _load_config(args)
    if args.overfit_probe:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, overfit_probe=True))
    data = load_study_set(_data_path(args, cfg))
    if cfg.train.overfit_probe:
        tr, va = data, data
    else:
        tr, _ = _split(data, cfg)
        folds = stratified_kfold(tr.ids, tr.labels, cfg.data.kfolds, cfg.data.split_seed)
        tr, va = tr.subset(folds.train_ids(0)), tr.subset(folds.folds[0])
    model = _model_from_config(cfg)
    cache = FeatureCache(model.backbone, data, [cfg.model.tap]) if cfg.train.freeze_backbone else None
    log = (lambda r: print(f"epoch {r.epoch:3d}  train {r.train_loss:.4f}  val {r.val_loss:.4f}  "
                           f"f1 {r.val_f1:.3f}", file=sys.stderr)) if args.verbose else None
    result = train(model, tr, va, cfg.train, cfg.model.mode, cache, log)
    meta = {"best_epoch": result.best_epoch, "stopped_epoch": result.stopped_epoch, "n_train": len(tr),
            "n_val": len(va), "kind": "two_stream_model"}
    digest = save_checkpoint(args.out_ckpt, model.parameters(), config_to_dict(cfg), meta)
    if args.history_out:
        write_history(args.history_out, result.history)
    print(json.dumps({"checkpoint": str(args.out_ckpt), "digest": digest, **meta}))


def cmd_crossval(args):
    cfg = _load_config(args)
    k = args.folds or cfg.data.kfolds
    data = load_study_set(_data_path(args, cfg))
    tr, _ = _split(data, cfg)
    base = _base_backbone(cfg)
    cache = FeatureCache(base, tr, [cfg.model.tap]) if cfg.train.freeze_backbone else None
    spec = ModelSpec(TapPoint.parse(cfg.model.tap), cfg.model.mode, cfg.model.backbone, cfg.model.hidden_units)
    cv = cross_validate(tr, spec, cfg.train, k, cfg.data.split_seed, base, cache, args.workers)
    print("fold  train_f1  val_f1  best_epoch")
    for f in cv.folds:
        print(f"{f.fold:4d}  {f.train_f1:8.3f}  {f.val_f1:6.3f}  {f.best_epoch:10d}")
    print(f"train F1 {format_pm(*cv.train_f1)}  val F1 {format_pm(*cv.val_f1)}")


def cmd_eval(args):
    model, cfg = _model_from_checkpoint(args.ckpt)
    data = load_study_set(args.data)
    if args.split != "all":
        tr, te = _split(data, cfg)
        data = te if args.split == "test" else tr
    report = evaluate(model, data, cfg.model.mode)
    if args.roc_out:
        if not report.roc_points:
            raise UsageError("ROC needs both classes in the evaluated split")
        write_roc_csv(args.roc_out, report.roc_points)
    if args.metrics_out:
        write_metrics(args.metrics_out, report)
    print(json.dumps({"n": len(data), "tp": report.tp, "fp": report.fp, "tn": report.tn, "fn": report.fn,
                      "precision": report.precision, "recall": report.recall, "f1": report.f1, "auc": report.auc}))


def cmd_predict(args):
    model, cfg = _model_from_checkpoint(args.ckpt)
    study = read_manifest(args.study)
    p1, p2 = study_patches(study, Path(args.study).parent)
    one = StudySet([study.study_id], np.array([study.y]), p1[None], p2[None])
    prob = float(predict_proba(model, one, cfg.model.mode)[0])
    label = "malignant" if prob >= THRESHOLD else "benign"
    print(f"{study.study_id} {prob:.6f} {label}")


def cmd_experiment(args):
    cfg = _load_config(args)
    data = load_study_set(_data_path(args, cfg))
    taps = [TapPoint.parse(t) for t in args.taps.split(",")]
    ecfg = ExperimentConfig(train=cfg.train, backbone=cfg.model.backbone, backbone_seed=cfg.model.backbone_seed,
                            split_fraction=cfg.data.split_fraction, kfolds=cfg.data.kfolds, seed=args.seed,
                            workers=args.workers)
    base = _base_backbone(cfg)
    result = experiment_matrix(data, taps, ecfg, base)
    lines = ["| Model | Time | Feats | Train (F1) | Val (F1) |", "|---|---|---|---|---|"]
    for r in result.rows:
        lines.append(f"| {r.model} | {r.time.upper()} | {r.tap} | {format_pm(r.train_f1_mean, r.train_f1_sd)} | "
                     f"{format_pm(r.val_f1_mean, r.val_f1_sd)} |")
    report = "## Cross-validation\n\n" + "\n".join(lines) + "\n\n## Best tap per model, test split\n\n" + \
        result.table + "\n"
    if args.report_out:
        Path(args.report_out).write_text(report)
    print(report)


def cmd_gradcheck(args):
    reports = run_suite(seed=args.seed)
    print(format_reports(reports))
    return 0 if all(r.passed for _, r in reports) else 1


def cmd_inspect(args):
    print(json.dumps(inspect_checkpoint(args.ckpt), indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tsnodule", description="Two-stream 3D CNN for longitudinal nodule malignancy.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n-studies", type=int)
    s.add_argument("--n-malignant", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synth)

    def common(q, mode=True):
        q.add_argument("--config")
        q.add_argument("--data")
        if mode:
            q.add_argument("--mode", choices=sorted(MODES))
            q.add_argument("--tap")
        q.add_argument("--epochs", type=int)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--history-out")
    t.add_argument("--overfit-probe", action="store_true", help="train and validate on the whole cohort")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("crossval", help="stratified k-fold cross-validation on the training split")
    common(c)
    c.add_argument("--folds", type=int)
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_crossval)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--roc-out")
    e.add_argument("--metrics-out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="probability and label for one study")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--study", required=True)
    pr.set_defaults(func=cmd_predict)

    x = sub.add_parser("experiment", help="T1 / T2 / T1T2 comparison over feature taps")
    common(x, mode=False)
    x.add_argument("--report-out")
    x.add_argument("--taps", default="Block4,AvgPool")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--workers", type=int, default=1)
    x.set_defaults(func=cmd_experiment)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect-ckpt", help="print a checkpoint manifest")
    i.add_argument("ckpt")
    i.set_defaults(func=cmd_inspect)
    return p


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if getattr(args, "epochs", None) is not None and args.epochs < 1:
            raise UsageError("--epochs must be positive")
        code = args.func(args)
        return 0 if code is None else code
    except (FormatError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())
