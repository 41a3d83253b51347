"""Degenerate Noise op on T4: plain DARTS versus R-DARTS(L2), plus the
discretization drop of each plain run.

    python3 scripts/t4_noise_failure.py
"""

import argparse
import dataclasses

from robustnas import harness
from robustnas.curvature import EigEntry
from robustnas.datagen import make_dataset
from robustnas.robustify import robust_darts, run_darts


def no_hessian(state, cfg, data):
    return EigEntry(state.epoch, 0.0)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    cfg = harness.desk_config("T4")
    space, data = cfg.space_spec(), make_dataset(cfg.data)
    print("seed  DARTS genotype                                      drop    R-DARTS genotype (chosen L2)")
    for seed in args.seeds:
        search = dataclasses.replace(cfg.search, seed=seed, l2_factor=3e-4, drop_path_max=0.0)
        plain = run_darts(space, search, data, eig_hook=no_hessian)
        drop = harness.discretization_drop(plain.state, data)["drop"]
        rd = robust_darts(space, search, data, retrain_epochs=cfg.retrain_epochs,
                          eig_hook=no_hessian, protocol=cfg.protocol)
        print(f"{seed:<5} {str(plain.genotype):<50} {drop:+.3f}  {rd.genotype} "
              f"({rd.extras['chosen_reg']:g})")
        errs = ", ".join(f"{v:g}: {e:.3f}" for v, e in zip(rd.extras["reg_values"],
                                                           rd.extras["retrain_valid_errors"]))
        print(f"      retrain valid error by L2: {errs}")


if __name__ == "__main__":
    main()
