"""Command-line experiment runner.

Subcommands ``run``, ``sweep``, ``ablate`` and ``attack-eval`` all take
``--config``, ``--out`` and ``--seed``. Every CSV ends with ``config_hash``
and ``seed`` columns so any row can be traced back to the exact config.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .protocol import METRIC_COLUMNS, ProtocolError, dump_checkpoint, run_experiment

log = logging.getLogger("fedgems")

SWEEP_AXES = {
    "public_fraction": ("split", "public_fraction", float),
    "server_hidden_dim": ("model", "server_hidden_dim", int),
    "client_count": (None, "client_count", int),
}
ABLATIONS = (
    ("full", {}),
    ("no_self_train", {"self_train_on": False}),
    ("no_self_distill", {"self_distill_on": False}),
    ("no_ensemble_distill", {"ensemble_distill_on": False}),
)
SUMMARY_COLUMNS = ("server_acc", "client_acc_mean", "client_acc_min", "client_acc_max",
                   "client_private_acc_mean", "kb_up_cum", "kb_down_cum")


def _fmt(v):
    # repr keeps every bit of a float, so reruns compare byte for byte
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def with_mode(cfg: ExperimentConfig, mode: str) -> ExperimentConfig:
    return dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, mode=mode))


def run(cfg: ExperimentConfig, out) -> dict:
    """One experiment. Returns the summary that is also written to ``summary.json``.

    The metrics CSV is flushed after every round, so a crash leaves the
    completed rounds on disk.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    h, seed = cfg.config_hash(), cfg.seed
    (out / "config.json").write_text(dump_config(cfg))
    data = cfg.build_data()
    pcfg = cfg.protocol_config()

    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*METRIC_COLUMNS, "config_hash", "seed"])
        fh.flush()

        def on_round(row):
            w.writerow([_fmt(v) for v in row.as_row()] + [h, seed])
            fh.flush()

        try:
            res = run_experiment(pcfg, data, on_round=on_round)
        except ProtocolError as e:
            _write_json(out / "summary.json", {"status": "failed", "error": str(e),
                                               "config_hash": h, "seed": seed})
            raise

    res.ledger.write_csv(out / "ledger.csv", {"config_hash": h, "seed": seed})
    dump_checkpoint(out / "checkpoint.bin", pcfg.rounds, res.server, res.clients,
                    res.pool, res.server_logits)
    final = res.final
    summary = {
        "status": "ok",
        "name": cfg.name,
        "config_hash": h,
        "seed": seed,
        "mode": pcfg.mode,
        "rounds": pcfg.rounds,
        "final": {k: final.get(k) for k in SUMMARY_COLUMNS},
        "branch_counts": {
            k: [getattr(m, k) for m in res.metrics]
            for k in ("n_selftrain", "n_selfdistill", "n_ensemble", "n_fallback")
        },
        "public_train_size": len(data.public_train),
        "public_test_size": len(data.public_test),
    }
    if cfg.compare_modes:
        summary["compare"] = {}
        for mode in cfg.compare_modes:
            other = run_experiment(with_mode(cfg, mode).protocol_config(), data).final
            summary["compare"][mode] = {k: other.get(k) for k in SUMMARY_COLUMNS}
    _write_json(out / "summary.json", summary)
    return summary


def sweep(cfg: ExperimentConfig, out, axis: str, values) -> list[dict]:
    """One run per axis value; a failed value is recorded and the sweep moves on."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {sorted(SWEEP_AXES)}")
    section, key, cast = SWEEP_AXES[axis]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for raw in values:
        value = cast(raw)
        status, final = "ok", {}
        try:
            if section is None:
                sub = dataclasses.replace(cfg, **{key: value})
            else:
                sub = dataclasses.replace(
                    cfg, **{section: dataclasses.replace(getattr(cfg, section), **{key: value})})
            sub.validate()
            final = run(sub, out / f"{axis}={value}")["final"]
            h = sub.config_hash()
        except (ValueError, ProtocolError) as e:
            log.warning("sweep %s=%s failed: %s", axis, value, e)
            status, h = f"error: {e}", cfg.config_hash()
        rows.append({"axis": axis, "value": value, "status": status,
                     **{k: final.get(k, "") for k in SUMMARY_COLUMNS},
                     "config_hash": h, "seed": cfg.seed})
    header = ["axis", "value", "status", *SUMMARY_COLUMNS, "config_hash", "seed"]
    _write_rows(out / "sweep.csv", header, [[r[c] for c in header] for r in rows])
    return rows


def ablate(cfg: ExperimentConfig, out) -> list[dict]:
    if cfg.protocol.mode != "fedgems":
        raise ValueError("ablation needs protocol.mode = 'fedgems'")
    out = Path(out)
    rows = []
    for name, flags in ABLATIONS:
        sub = dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, **flags))
        s = run(sub, out / name)
        p = sub.protocol
        rows.append({
            "variant": name,
            "self_train_on": p.self_train_on,
            "self_distill_on": p.self_distill_on,
            "ensemble_distill_on": p.ensemble_distill_on,
            "server_acc": s["final"]["server_acc"],
            "client_acc_mean": s["final"]["client_acc_mean"],
            **{f"{k}_total": sum(v) for k, v in s["branch_counts"].items()},
            "config_hash": s["config_hash"],
            "seed": s["seed"],
        })
    _write_rows(out / "ablation.csv", list(rows[0]), [list(r.values()) for r in rows])
    return rows


def _cell(after: float, delta_pct: float) -> str:
    return f"{100 * after:.2f}/{delta_pct:+06.2f}"


def attack_eval(cfg: ExperimentConfig, out, kinds, modes=("fedgem", "fedgems")) -> list[dict]:
    """Honest baseline plus one poisoned run per kind, on ``paired_seeds`` seeds.

    ``*_delta`` is the seed-averaged signed change in accuracy (attacked
    minus honest); the A/B cells use the percentage change relative to the
    honest accuracy.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + i for i in range(cfg.paired_seeds)]
    rows = []
    for mode in modes:
        if mode not in ("fedgem", "fedgems"):
            raise ValueError(f"attack-eval compares fedgem and fedgems, not {mode!r}")
        finals = {}
        for kind in ["none", *kinds]:
            for s in seeds:
                sub = with_mode(cfg.with_seed(s), mode)
                sub = dataclasses.replace(sub, attack=dataclasses.replace(cfg.attack, kind=kind))
                sub.validate()
                finals[kind, s] = run(sub, out / mode / kind / f"seed={s}")["final"]
        for kind in ["none", *kinds]:
            row = {"mode": mode, "kind": kind}
            for side, col in (("server", "server_acc"), ("client", "client_acc_mean")):
                after = float(np.mean([finals[kind, s][col] for s in seeds]))
                honest = float(np.mean([finals["none", s][col] for s in seeds]))
                delta = float(np.mean([finals[kind, s][col] - finals["none", s][col] for s in seeds]))
                row[f"{side}_after"] = after
                row[f"{side}_delta"] = delta
                row[f"{side}_ab"] = _cell(after, 100 * delta / honest if honest else 0.0)
            row["paired_seeds"] = len(seeds)
            row["config_hash"] = cfg.config_hash()
            row["seed"] = cfg.seed
            rows.append(row)
    _write_rows(out / "attack_eval.csv", list(rows[0]), [list(r.values()) for r in rows])
    return rows


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedgems", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    common(sub.add_parser("run", help="run one experiment"))
    sp = sub.add_parser("sweep", help="one run per value of an axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated axis values")
    common(sub.add_parser("ablate", help="full run plus each selective branch disabled"))
    sp = sub.add_parser("attack-eval", help="poisoning A/B table")
    common(sp)
    sp.add_argument("--kinds", default="PAF,LIE,OFOM", help="comma-separated; empty for baseline only")
    sp.add_argument("--modes", default="fedgem,fedgems")
    return p


def _split(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.output_dir)
    try:
        if args.command == "run":
            s = run(cfg, out)
            print(json.dumps(s["final"], sort_keys=True))
        elif args.command == "sweep":
            rows = sweep(cfg, out, args.axis, _split(args.values))
            if any(r["status"] != "ok" for r in rows):
                return 1
        elif args.command == "ablate":
            for r in ablate(cfg, out):
                print(f"{r['variant']:20s} server_acc={r['server_acc']:.4f}")
        else:
            for r in attack_eval(cfg, out, _split(args.kinds), _split(args.modes)):
                print(f"{r['mode']:8s} {r['kind']:5s} server {r['server_ab']}  client {r['client_ab']}")
    except (ValueError, ProtocolError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
