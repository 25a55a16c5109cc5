"""Memorize a handful of synthetic pairs with the full tiny two-stream model.

    python scripts/overfit_probe.py --pairs 8 --lr 1e-3 --batch 4
"""
import argparse
import time

from tsnodule.backbone import BackboneConfig
from tsnodule.cohort import synth_study_set
from tsnodule.model import build_model
from tsnodule.synth import SynthConfig
from tsnodule.train import TrainConfig, evaluate, train


def run_probe(pairs=8, lr=1e-3, batch=4, epochs=200, seed=0, verbose=False):
    """Returns ``(train F1, epochs used, seconds)``."""
    data = synth_study_set(SynthConfig(n_studies=pairs, n_malignant=pairs // 2, seed=seed))
    model = build_model(BackboneConfig.tiny(), "AvgPool", seed=seed)
    cfg = TrainConfig(epochs=epochs, patience=epochs - 1, lr=lr, batch_size=batch, overfit_probe=True, seed=seed)
    log = (lambda r: print(f"epoch {r.epoch:3d}  loss {r.train_loss:.4f}  f1 {r.val_f1:.3f}", flush=True)) \
        if verbose else None
    t0 = time.perf_counter()
    result = train(model, data, data, cfg, on_epoch_end=log)
    seconds = time.perf_counter() - t0
    return evaluate(model, data).f1, result.stopped_epoch, seconds


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    f1, used, seconds = run_probe(args.pairs, args.lr, args.batch, args.epochs, args.seed, verbose=True)
    print(f"train F1 {f1:.3f} after {used} epochs in {seconds:.0f} s")


if __name__ == "__main__":
    main()
