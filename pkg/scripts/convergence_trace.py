"""Print the mean IID distance after each diffusion round of one communication round.

    python scripts/convergence_trace.py --alpha 0.5 --epsilon 0.0 --seed 0
"""
import argparse

from feddif import channel
from feddif.dist import iid_distance
from feddif.sim import SimConfig, init_state, run_communication_round


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alpha", type=float, default=1.0)
    ap.add_argument("--epsilon", type=float, default=0.0)
    ap.add_argument("--n-pues", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--open-channel", action="store_true",
                    help="drop QoS gating and the bandwidth budget")
    args = ap.parse_args(argv)
    extra = {}
    if args.open_channel:
        extra = dict(gamma_min=0.0, max_outage=1.0, cue_arrival_rate=0.0,
                     radio=channel.RadioConfig(total_bandwidth=1e12))
    cfg = SimConfig(n_pues=args.n_pues, alpha=args.alpha, epsilon=args.epsilon,
                    n_rounds=1, seed=args.seed, test_samples=100, **extra)
    state = init_state(cfg)
    _, metrics = run_communication_round(state, cfg)
    detail = state.last_round
    print("diffusion_round,mean_iid_distance")
    for k, d in enumerate(detail.mean_iid_history):
        print(f"{k},{d:.6g}")
    lengths = [len(m.chain) for m in detail.models]
    print(f"# chains {lengths}, worst distance {max(iid_distance(m.dol) for m in detail.models):.3g}, "
          f"{metrics.models_transmitted} models sent, {metrics.subframes} sub-frames")


if __name__ == "__main__":
    main()
