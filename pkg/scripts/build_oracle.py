"""Train every genotype of a finite space under the desk protocol.

    python3 scripts/build_oracle.py --space T5 --out results/oracle
"""

import argparse
import time
from pathlib import Path

from robustnas import harness
from robustnas.datagen import make_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--space", default="T5")
    ap.add_argument("--out", default="results/oracle")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = harness.desk_config(args.space)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    table = harness.build_oracle(cfg.space_spec(), make_dataset(cfg.data), cfg.protocol,
                                 cfg.oracle_seeds, cfg.k, args.jobs)
    seconds = time.perf_counter() - t0
    path = out / f"oracle_{args.space}.csv"
    table.save(path)
    best = table.best()
    print(f"{len(table)} genotypes in {seconds:.0f} s -> {path}")
    print(f"best {best.genotype}: valid {best.valid_error:.4f} test {best.test_error:.4f}")
    for row in sorted(table.rows, key=lambda r: r.test_error)[:5]:
        print(f"  {row.test_error:.4f}  {row.genotype}")


if __name__ == "__main__":
    main()
