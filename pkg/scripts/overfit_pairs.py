"""Fit the association heads to a fixed set of two-frame pairs and report loss and accuracy."""

import argparse
import time

from attentrack.experiments import Recipe, train_stages, two_frame_pairs
from attentrack.model import ModelConfig, MotionTrack
from attentrack.train import evaluate_association, greedy_accuracy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=50)
    ap.add_argument("--max-objects", type=int, default=10)
    ap.add_argument("--encoder-steps", type=int, default=3000)
    ap.add_argument("--da-steps", type=int, default=5000)
    args = ap.parse_args()

    pool, pairs = two_frame_pairs(args.pairs, args.max_objects)
    model = MotionTrack(ModelConfig(seed=0))
    recipe = Recipe(steps={"encoder": args.encoder_steps, "da_frozen": args.da_steps, "joint": 0},
                    augment={"encoder": False, "da_frozen": False, "joint": False})
    t0 = time.perf_counter()
    train_stages(model, pool, recipe, ["encoder", "da_frozen"], log=print)
    loss, acc = evaluate_association(model, pairs)
    print(f"association loss {loss:.5f}  row accuracy {acc:.4f}  "
          f"after greedy {greedy_accuracy(model, pairs):.4f}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
