"""Print how FP-AW's weights evolve on one environment for each true cost."""

import argparse

import numpy as np

from formation_forge.core import generate_environment
from formation_forge.costs import TrueCost
from formation_forge.sim import Method, SimConfig, run_trial


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--every", type=int, default=300, help="print every N steps")
    args = ap.parse_args()

    env = generate_environment(args.seed)
    for cost in TrueCost:
        log = run_trial(env, SimConfig(method=Method.FP_AW, true_cost=cost))
        print(f"== true cost {cost.value}: {int(log.admitted.sum())} admitted, "
              f"{int(log.adopted.sum())} adoptions")
        for k in range(0, log.n_records, args.every):
            a = np.array2string(log.alpha[k], precision=3, suppress_small=True)
            print(f"  t={k * log.dt:6.1f}s  alpha={a}  w={log.w[k]:.3f}")
        print(f"  final costs: {log.final_costs()}")


if __name__ == "__main__":
    main()
