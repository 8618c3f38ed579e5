"""Train every head briefly on the same synthetic data and compare test metrics.

Defaults are small (32px images, short budgets) so the whole comparison runs
in a few minutes on one core. Pass --size 64 --episodes 300 for the
acceptance-scale setting.

    python3 demos/02_compare_heads.py
"""

import argparse
import time

from fewshot.data import synth_generate
from fewshot.train import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--episodes", type=int, default=120)
    ap.add_argument("--epochs", type=int, default=8, help="siamese training epochs")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    ds = synth_generate(per_class=100, image_size=args.size, seed=args.seed)
    common = dict(image_size=args.size, seed=args.seed, val_episodes=20)
    episodic = dict(k_shot=5, q_query=10, max_episodes=args.episodes, max_epochs=None, eval_interval=40)
    configs = {
        "hybrid": TrainConfig.for_head("hybrid", **common, **episodic),
        "proto": TrainConfig.for_head("proto", **common, **episodic),
        "matching": TrainConfig.for_head("matching", **common, **episodic),
        "relation": TrainConfig.for_head("relation", **common, **episodic),
        "siamese": TrainConfig.for_head("siamese", **common, max_epochs=args.epochs),
    }

    print(f"{'head':9s} {'acc':>6s} {'prec':>6s} {'rec':>6s} {'f1':>6s} {'best val':>8s} {'secs':>6s}")
    for head, cfg in configs.items():
        t0 = time.perf_counter()
        model, result = train(cfg, ds)
        report = evaluate(model, ds, "test", 50, cfg)
        print(f"{head:9s} {report.accuracy:6.3f} {report.precision:6.3f} {report.recall:6.3f} "
              f"{report.f1:6.3f} {result.best_val_accuracy:8.3f} {time.perf_counter() - t0:6.0f}")

    print("\nsiamese accuracy is triplet pair accuracy (d_pos < d_neg), the rest are episode query accuracy")


if __name__ == "__main__":
    main()
