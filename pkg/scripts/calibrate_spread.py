"""Pick the blob spread so stand-alone clients leave headroom.

For each spread, prints the Bayes accuracy (nearest true mean) and the
stand-alone server and mean-client accuracy of the bundled config.
"""
from __future__ import annotations

import argparse
import dataclasses
from dataclasses import dataclass

import numpy as np

from fedgems.cli import with_mode
from fedgems.config import load_config
from fedgems.protocol import run_experiment


@dataclass(frozen=True)
class Calibration:
    config: str = "configs/table2-synthetic-dirichlet.json"
    spreads: tuple = (1.5, 1.7, 1.9, 2.1, 2.5)
    bayes_samples: int = 200_000


def bayes_accuracy(class_count, input_dim, spread, seed, n):
    # same draw order as generate_blobs for the class means
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((class_count, input_dim))
    mc = np.random.default_rng([seed, 999])
    y = mc.integers(0, class_count, n)
    X = means[y] + spread * mc.standard_normal((n, input_dim))
    d = ((X[:, None, :] - means[None]) ** 2).sum(-1)
    return float((d.argmin(1) == y).mean())


def main(cal: Calibration):
    base = load_config(cal.config)
    print("spread  bayes   standalone_server  standalone_clients")
    for s in cal.spreads:
        cfg = dataclasses.replace(base, dataset=dataclasses.replace(base.dataset, spread=s))
        d = cfg.dataset
        b = bayes_accuracy(d.class_count, d.input_dim, s, cfg.seed, cal.bayes_samples)
        res = run_experiment(with_mode(cfg, "standalone").protocol_config(), cfg.build_data()).final
        print(f"{s:6.2f}  {b:.4f}  {res.server_acc:17.4f}  {res.client_acc_mean:18.4f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=Calibration.config)
    p.add_argument("--spreads", type=lambda s: tuple(float(x) for x in s.split(",")),
                   default=Calibration.spreads)
    a = p.parse_args()
    main(Calibration(config=a.config, spreads=a.spreads))
