"""Compare FedDif, baseline FedAvg and full diffusion on paired seeds.

    python scripts/paired_comparison.py --alpha 1.0 --rounds 30 --seeds 0 1 2 3 4
"""
import argparse
from dataclasses import replace

from feddif.sim import Mode, SimConfig, run_experiment

COLUMNS = ("seed", "mode", "peak_accuracy", "final_weight_divergence",
           "total_diffusion_rounds", "total_models", "total_subframes")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--epsilon", type=float, default=0.04)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args(argv)
    print(",".join(COLUMNS))
    for seed in args.seeds:
        cfg = SimConfig(alpha=args.alpha, epsilon=args.epsilon, n_rounds=args.rounds, seed=seed)
        for mode in Mode:
            s = run_experiment(replace(cfg, mode=mode)).summary
            row = [seed, mode.value] + [s[c] for c in COLUMNS[2:]]
            print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))


if __name__ == "__main__":
    main()
