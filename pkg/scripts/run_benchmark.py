"""Run the synthetic transfer benchmark and print per-seed accuracies.

    python3 scripts/run_benchmark.py --seeds 0 1 2
    python3 scripts/run_benchmark.py --mixing 0.5 --out bench.csv
"""

import argparse
import csv
import sys
import time

from dbilstm.benchmark import BenchmarkConfig, run_benchmark


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--mixing", type=float, default=BenchmarkConfig.subject_mixing_scale)
    p.add_argument("--noise", type=float, default=BenchmarkConfig.noise_sigma)
    p.add_argument("--gestures", type=int, default=BenchmarkConfig.n_gestures)
    p.add_argument("--pretrain-epochs", type=int, default=BenchmarkConfig.pretrain_epochs)
    p.add_argument("--retrain-epochs", type=int, default=BenchmarkConfig.retrain_epochs)
    p.add_argument("--out", help="CSV file for per-seed results")
    args = p.parse_args(argv)

    cfg = BenchmarkConfig(
        n_gestures=args.gestures,
        subject_mixing_scale=args.mixing,
        noise_sigma=args.noise,
        pretrain_epochs=args.pretrain_epochs,
        retrain_epochs=args.retrain_epochs,
    )
    started = time.perf_counter()

    def show(run):
        accs = "  ".join(f"{k}={v:.3f}" for k, v in run.accuracy.items())
        print(f"seed {run.seed}: {accs}  ({run.wall_time_s:.0f} s)", flush=True)

    runs = run_benchmark(cfg, args.seeds, on_seed=show)
    regimes = list(runs[0].accuracy)
    means = {r: sum(run.accuracy[r] for run in runs) / len(runs) for r in regimes}
    print("mean:   " + "  ".join(f"{k}={v:.3f}" for k, v in means.items()))
    print(f"total {time.perf_counter() - started:.0f} s")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", *regimes, "wall_time_s"])
            for run in runs:
                w.writerow([run.seed, *(run.accuracy[r] for r in regimes), f"{run.wall_time_s:.1f}"])


if __name__ == "__main__":
    sys.exit(main())
