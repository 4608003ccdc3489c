#!/usr/bin/env python3
"""Run the default Monte Carlo coverage experiment and print a summary.

Equivalent to `multippi simulate` with the default configuration
(K=3, d=2, n=200, N=800, asymmetric ~0.6-accuracy noise, tuned lambda);
kept as a script for quick interactive sweeps over noise models.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from multippi import simulate  # noqa: E402


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=1000)
    parser.add_argument("--noise", default="asymmetric",
                        choices=["asymmetric", "identity", "uniform"])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    spec = simulate.default_spec(seed=args.seed)
    noise = {"asymmetric": simulate.ASYMMETRIC_3CLASS,
             "identity": simulate.NoiseModel.identity(3),
             "uniform": simulate.NoiseModel.uniform(3)}[args.noise]
    report = simulate.coverage_experiment(spec, noise, args.reps,
                                          threads=args.threads)
    print(f"noise={args.noise} reps={args.reps} "
          f"failures={report.failures}")
    for tag in simulate.ESTIMATORS:
        print(f"  {tag:10s} coverage {np.round(report.coverage[tag], 3).tolist()} "
              f"median width {np.round(report.median_width[tag], 3).tolist()}")
    print(f"  lambda mean {report.lambda_mean:.3f} "
          f"(raw {report.lambda_raw_mean:.3f}, sd {report.lambda_sd:.3f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
