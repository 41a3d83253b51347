"""λ_w sweep on T5: curvature, regret and early stopping over 3 seeds x 4 levels.

Needs an oracle CSV from build_oracle.py:

    python3 scripts/t5_l2_sweep.py --oracle results/oracle/oracle_T5.csv --out results/t5_sweep
"""

import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from robustnas import harness
from robustnas.search_space import discretize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--oracle", required=True)
    ap.add_argument("--out", default="results/t5_sweep")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    base = harness.desk_config("T5", oracle=args.oracle, seeds=[0, 1, 2],
                               l2_values=[3e-4, 9e-4, 27e-4, 81e-4])
    out = Path(args.out)
    plain = harness.sweep(base, out / "darts", jobs=args.jobs)
    es = harness.sweep(dataclasses.replace(base, strategy="darts_es", l2_values=[3e-4]),
                       out / "darts_es", jobs=args.jobs)

    stats = json.loads((plain / "correlation.json").read_text())
    print(f"pearson(final lambda_max, test regret) = {stats['pearson_lambda_regret']:.3f} "
          f"over {stats['pearson_n']} runs")
    print("l2        mean lambda_max  mean regret")
    for l2, s in stats["by_l2"].items():
        print(f"{float(l2):<9g} {s['mean_lambda_max']:>15.3f}  {s['mean_test_regret']:.4f}")

    # regret over epochs of the unregularized runs, read back from trace.csv
    table = harness.OracleTable.load(args.oracle)
    print("\nseed  final regret  min regret  ES regret  ES epoch")
    for seed in base.seeds:
        trace = (plain / f"l2_0.0003_s{seed}" / "trace.csv").read_text().splitlines()[1:]
        regrets = [float(line.split(",")[-1]) for line in trace]
        res = json.loads((es / f"l2_0.0003_s{seed}" / "result.json").read_text())
        print(f"{seed:<5} {regrets[-1]:>12.4f} {min(regrets):>11.4f} "
              f"{res['test_regret']:>10.4f}  {res['stop_epoch']}")


if __name__ == "__main__":
    main()
