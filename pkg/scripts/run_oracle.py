"""Train on the noise-free world and track held-out noise-free scenarios.

Checks the identity-keeping ceiling of the tracker: IDS should be 0 and AMOTA close to 1.
Pass several --test-base values to see how stable that is across scenario sets.
"""

import argparse
import time

from attentrack.experiments import (ORACLE_TEST_SEEDS, POOL_SEEDS, Recipe, evaluate_tracking, make_scenarios,
                                    oracle_world, train_stages)
from attentrack.model import ModelConfig, MotionTrack
from attentrack.train import STAGES


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--test-base", type=int, nargs="+", default=[ORACLE_TEST_SEEDS.start])
    ap.add_argument("--n-test", type=int, default=20)
    args = ap.parse_args()

    pool = make_scenarios(oracle_world(), POOL_SEEDS)
    model = MotionTrack(ModelConfig(seed=0))
    t0 = time.perf_counter()
    train_stages(model, pool, Recipe(steps={s: args.steps for s in STAGES}), log=print)
    print(f"trained in {time.perf_counter() - t0:.0f}s")
    for base in args.test_base:
        test = make_scenarios(oracle_world(), range(base, base + args.n_test))
        o = evaluate_tracking(model, test).overall
        print(f"seeds {base}..{base + args.n_test - 1}: AMOTA {o['amota']:.4f}  IDS {o['ids']}  "
              f"FP {o['fp']}  FN {o['fn']}")


if __name__ == "__main__":
    main()
