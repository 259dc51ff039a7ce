"""Paired-seed comparison of fedgems against stand-alone and fedgem.

The acceptance suite judges the bundled seed only; this script shows how
stable each direction is across seeds.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np

from fedgems.cli import with_mode
from fedgems.config import load_config
from fedgems.protocol import run_experiment

MODES = ("standalone", "fedgem", "fedgems")


@dataclass(frozen=True)
class Study:
    config: str = "configs/table2-synthetic-dirichlet.json"
    seeds: int = 8


def main(study: Study):
    base = load_config(study.config)
    finals = {m: [] for m in MODES}
    for seed in range(study.seeds):
        cfg = base.with_seed(seed)
        data = cfg.build_data()
        for m in MODES:
            finals[m].append(run_experiment(with_mode(cfg, m).protocol_config(), data).final)
        print(f"seed {seed}: " + "  ".join(
            f"{m} {finals[m][-1].server_acc:.4f}/{finals[m][-1].client_acc_mean:.4f}" for m in MODES))
    for other in ("standalone", "fedgem"):
        for side in ("server_acc", "client_acc_mean"):
            d = np.array([getattr(a, side) - getattr(b, side)
                          for a, b in zip(finals["fedgems"], finals[other])])
            se = d.std(ddof=1) / np.sqrt(len(d)) if len(d) > 1 else float("nan")
            print(f"fedgems - {other:10s} {side:16s} mean {d.mean():+.4f}  se {se:.4f}  "
                  f"wins {(d > 0).sum()}/{len(d)}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=Study.config)
    p.add_argument("--seeds", type=int, default=Study.seeds)
    a = p.parse_args()
    main(Study(a.config, a.seeds))
