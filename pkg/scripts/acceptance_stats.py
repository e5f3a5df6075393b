"""Per-seed numbers behind the statistical acceptance checks.

    python scripts/acceptance_stats.py augment transfer ensemble confusable --seeds 10
"""

import argparse
import time

import numpy as np

from ensemblefit.experiments import (
    PRETRAIN_EPOCHS,
    augmentation_trial,
    confusable_trial,
    ensemble_trial,
    pretrain_backbones,
    transfer_trial,
)
from ensemblefit.transfer import BACKBONES

PRETRAIN_SEED = 0


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("checks", nargs="+", choices=["augment", "transfer", "ensemble", "confusable"])
    parser.add_argument("--seeds", type=int, default=10)
    args = parser.parse_args()

    pretrained = None
    if set(args.checks) - {"augment"}:
        t = time.time()
        pretrained = pretrain_backbones(list(BACKBONES), PRETRAIN_SEED, epochs=PRETRAIN_EPOCHS)
        accs = {k: round(v.final_train_acc, 3) for k, v in pretrained.items()}
        print(f"pretrain {accs} {time.time() - t:.0f}s", flush=True)

    for check in args.checks:
        t = time.time()
        for seed in range(args.seeds):
            if check == "augment":
                r = augmentation_trial(seed)
                print(f"augment seed {seed}: raw {r.raw_val_acc:.3f} aug {r.aug_val_acc:.3f}", flush=True)
            elif check == "transfer":
                r = transfer_trial(seed, pretrained["medium"])
                print(f"transfer seed {seed}: pretrained epoch {r.pretrained_epoch} scratch epoch {r.scratch_epoch}"
                      f" pass {r.passed}", flush=True)
            elif check == "ensemble":
                r = ensemble_trial(seed, pretrained)
                print(f"ensemble seed {seed}: ens acc {r.ensemble_test_acc:.3f} members "
                      f"{np.round(r.member_test_accs, 3).tolist()} ens eps {r.ensemble_epsilon:.5f} member eps "
                      f"{np.round(r.member_epsilons, 5).tolist()} acc_ok {r.accuracy_ok} stable_ok {r.stability_ok}",
                      flush=True)
            else:
                r = confusable_trial(seed, pretrained["medium"])
                print(f"confusable seed {seed}: corr diff {r.correlation_diff:.4f} errors "
                      f"{r.confusable_errors}/{r.confusable_total} nonconf acc {r.nonconfusable_acc:.3f}"
                      f" pass {r.passed}", flush=True)
        print(f"{check}: {time.time() - t:.0f}s", flush=True)


if __name__ == "__main__":
    main()
