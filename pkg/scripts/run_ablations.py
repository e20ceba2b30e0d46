"""Train both ablation pairs on the noisy benchmark and print the comparison tables.

    python3 scripts/run_ablations.py --out runs/ablations            # full recipe, ~10 min
    python3 scripts/run_ablations.py --out runs/quick --steps 2000   # quick look
"""

import argparse
import csv
import json
import time
from pathlib import Path

from attentrack.experiments import (BENCHMARK_TEST_SEEDS, POOL_SEEDS, Recipe, benchmark_world, evaluate_tracking,
                                    make_scenarios, qem_detection_errors, train_da_ablation, train_qem_detectors)
from attentrack.train import STAGES


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", required=True)
    ap.add_argument("--steps", type=int, default=20000, help="steps per training stage")
    ap.add_argument("--seed", type=int, default=0, help="model initialisation seed")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pool = make_scenarios(benchmark_world(), POOL_SEEDS)
    test = make_scenarios(benchmark_world(), BENCHMARK_TEST_SEEDS)
    recipe = Recipe(steps={s: args.steps for s in STAGES})
    rows = []

    t0 = time.perf_counter()
    da = train_da_ablation(pool, recipe, args.seed)
    print("\n".join(da.logs))
    for label, model in (("w/ transformer DA", da.with_component), ("w/o transformer DA", da.without_component)):
        o = evaluate_tracking(model, test).overall
        rows.append({"ablation": "da_transformer", "arm": label, "amota": o["amota"], "amotp": o["amotp"],
                     "mota": o["mota"], "ids": o["ids"], "det_error": None})
    print(f"transformer DA ablation: {time.perf_counter() - t0:.0f}s")

    t0 = time.perf_counter()
    qem = train_qem_detectors(pool, recipe, args.seed)
    print("\n".join(qem.logs))
    for label, err in zip(("w/ QEM", "w/o QEM"), qem_detection_errors(qem, test)):
        rows.append({"ablation": "qem", "arm": label, "amota": None, "amotp": None, "mota": None, "ids": None,
                     "det_error": err})
    print(f"QEM detector ablation: {time.perf_counter() - t0:.0f}s\n")

    print(f"{'arm':<20} {'AMOTA':>8} {'AMOTP':>8} {'MOTA':>8} {'IDS':>6} {'det err':>10}")
    for r in rows:
        cells = [f"{r[k]:.4f}" if isinstance(r[k], float) else ("-" if r[k] is None else str(r[k]))
                 for k in ("amota", "amotp", "mota", "ids", "det_error")]
        print(f"{r['arm']:<20} {cells[0]:>8} {cells[1]:>8} {cells[2]:>8} {cells[3]:>6} {cells[4]:>10}")
    a, b = rows[0]["amota"], rows[1]["amota"]
    print(f"\nAMOTA ratio (w/ / w/o transformer DA): {a / b if b else float('inf'):.3f}")

    with open(out / "ablations.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    (out / "ablations.json").write_text(json.dumps({"steps": args.steps, "seed": args.seed, "rows": rows},
                                                   indent=2) + "\n")


if __name__ == "__main__":
    main()
