"""Run the default 4 environment x 5 trial sweep and print both relative-cost tables."""

import argparse
import time

from formation_forge.evaluation import BenchConfig, benchmark


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="bench_out")
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--trials", type=int, default=5)
    args = ap.parse_args()

    t0 = time.perf_counter()
    res = benchmark(BenchConfig(trials=args.trials), args.out_dir, threads=args.threads)
    print(res.protection.to_text("Protection cost"))
    print()
    print(res.multi.to_text("Multi-cost"))
    print(f"\naborted trials: {res.aborted}   wall time: {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
