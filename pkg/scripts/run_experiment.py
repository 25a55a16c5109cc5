"""T1 / T2 / T1T2 comparison on the default synthetic cohort, one table per seed.

    python scripts/run_experiment.py --seeds 1,2,3 --taps Block4,AvgPool
    python scripts/run_experiment.py --finetune   # train the backbone too (slow)
"""
import argparse
import dataclasses
import time

from tsnodule.backbone import BackboneConfig, build_backbone
from tsnodule.cohort import synth_study_set
from tsnodule.experiment import ExperimentConfig, experiment_matrix
from tsnodule.features import FeatureCache
from tsnodule.synth import SynthConfig
from tsnodule.train import TrainConfig


def run_seeds(seeds, taps=("Block4", "AvgPool"), freeze=True, backbone_seed=0, workers=1, on_result=None):
    """Experiment results per seed over one shared cohort and (frozen) feature cache."""
    data = synth_study_set(SynthConfig())
    base = build_backbone(BackboneConfig.tiny(), backbone_seed)
    cache = FeatureCache(base, data, taps) if freeze else None
    results = {}
    for seed in seeds:
        cfg = ExperimentConfig(train=TrainConfig(freeze_backbone=freeze), backbone_seed=backbone_seed, seed=seed,
                               workers=workers)
        results[seed] = experiment_matrix(data, taps, cfg, base, cache)
        if on_result is not None:
            on_result(seed, results[seed])
    return results


def margins(result):
    """TS test F1 minus each single-time baseline."""
    f1 = {r.time: r.test.f1 for r in result.best}
    return f1["t1t2"] - f1["t1"], f1["t1t2"] - f1["t2"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--taps", default="Block4,AvgPool")
    ap.add_argument("--finetune", action="store_true")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    t0 = time.perf_counter()

    def show(seed, res):
        print(f"\nseed {seed}  ({time.perf_counter() - t0:.0f} s)")
        for r in res.rows:
            print(f"  cv {r.model:8s} {r.time:4s} {str(r.tap):7s} val F1 {r.val_f1_mean:.3f}  "
                  f"median epochs {r.median_epochs}")
        print(res.table)
        print("TS margin over T1 {:+.3f}, over T2 {:+.3f}".format(*margins(res)), flush=True)

    run_seeds([int(s) for s in args.seeds.split(",")], args.taps.split(","), not args.finetune,
              workers=args.workers, on_result=show)


if __name__ == "__main__":
    main()
