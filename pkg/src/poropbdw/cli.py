"""Command-line entry point: ``poropbdw <command> [--config F] [--out D] [--seed S] [--preset P]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .fem import MaterialParameters, simulate
from .formats import read_meas, write_json, write_meas, write_poro
from .observation import MeasurementSeries, add_noise, observe

COMMANDS = ("forward", "train", "reconstruct", "validate", "noise-study", "slice-study", "mismatch-study",
            "classify", "report")


def load_config(args) -> pl.ExperimentConfig:
    overrides = {}
    if args.config:
        overrides.update(json.loads(Path(args.config).read_text()))
    name = overrides.pop("preset", None) or args.preset
    cfg = pl.preset(name)
    cfg = pl.ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out=args.out)
    return cfg


def _theta(args) -> tuple:
    if args.theta:
        return tuple(args.theta)
    r = pl.ParameterRanges().as_array()
    return tuple(r.mean(axis=1))


def cmd_forward(cfg, args, out: Path) -> dict:
    theta = _theta(args)
    mesh = pl.build_mesh(cfg)
    ts = simulate(mesh, MaterialParameters().with_theta(*theta), cfg.time, literal_2E=cfg.literal_2E)
    write_poro(out / "forward.poro", ts.states, ts.tau)
    info = {"theta": theta, "N": ts.states.shape[1], "steps": ts.steps, "tau": ts.tau,
            "max_abs_u": float(np.abs(ts.u).max()), "max_abs_p": float(np.abs(ts.p).max()),
            "config_hash": cfg.hash}
    write_json(out / "summary.json", info)
    return info


def cmd_train(cfg, args, out: Path) -> dict:
    tr = pl.run_training(cfg, out=out)
    return pl.export_report({"training": tr}, out, cfg)


def cmd_reconstruct(cfg, args, out: Path) -> dict:
    tr = pl.run_training(cfg)
    obs, R = tr.obs, tr.reconstructor
    if args.measurements:
        ms = read_meas(args.measurements)
        if ms.m != obs.m_raw:
            raise SystemExit(f"measurement file has m={ms.m}, observation space expects {obs.m_raw}")
        rows = ms.values
        theta = None
    else:
        theta = _theta(args)
        states = tr.truth(theta)
        ms = observe(pl._Series(states, cfg.tau), obs.functionals)
        if args.xi:
            ms = add_noise(ms, args.xi, pl.stream_seed(cfg.seed, pl.STREAM_NOISE, 0))
        # retained steps 1..s only, so the file can be fed back with --measurements
        ms = MeasurementSeries(ms.values[1:], ms.tau, ms.xi, ms.seed)
        write_meas(out / "measurements.meas", ms)
        rows = ms.values
    L = obs.coordinates(rows)
    states = R.reconstruct_series(L)
    write_poro(out / "reconstruction.poro", states, cfg.tau)
    c = R.coefficients(L.T)
    diag = R.diagnose(R.Phi @ c, R.W @ (L.T - R.G @ c), c, L.T)
    diag.update(theta=theta, config_hash=cfg.hash, seed=cfg.seed)
    write_json(out / "reconstruction.json", diag)
    return diag


def _study(key, fn):
    def run(cfg, args, out: Path) -> dict:
        tr = pl.run_training(cfg)
        return pl.export_report({key: fn(cfg, tr), "training": tr}, out, cfg)
    return run


def cmd_report(cfg, args, out: Path) -> dict:
    tr = pl.run_training(cfg, out=out)
    arts = {
        "training": tr,
        "validation": pl.run_validation(cfg, tr),
        "noise": pl.run_noise_study(cfg, tr),
        "slices": pl.run_slice_study(cfg, tr),
        "mismatch": pl.run_mismatch_study(cfg, tr),
        "classification": pl.run_classification(cfg, tr),
    }
    return pl.export_report(arts, out, cfg)


HANDLERS = {
    "forward": cmd_forward,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "validate": _study("validation", lambda cfg, tr: pl.run_validation(cfg, tr)),
    "noise-study": _study("noise", pl.run_noise_study),
    "slice-study": _study("slices", pl.run_slice_study),
    "mismatch-study": _study("mismatch", pl.run_mismatch_study),
    "classify": _study("classification", pl.run_classification),
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with experiment config keys")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--preset", choices=("desk", "paper"), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="poropbdw", description="PBDW reconstruction of poroelastic states")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        if name in ("forward", "reconstruct"):
            s.add_argument("--theta", type=float, nargs=4, metavar=("KAPPA", "E", "NU", "P_VENT"))
        if name == "reconstruct":
            s.add_argument("--measurements", help="MEAS1 file of raw voxel values (steps 1..s)")
            s.add_argument("--xi", type=float, default=0.0, help="noise intensity for synthetic data")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        cfg.validate()
    except (ValueError, TypeError, OSError, json.JSONDecodeError) as exc:
        print(f"poropbdw: invalid configuration: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = HANDLERS[args.command](cfg, args, out)
    print(json.dumps(_brief(result), sort_keys=True, default=str))
    return 0


def _brief(result: dict) -> dict:
    keep = ("config_hash", "training", "validation", "classification", "noise", "beta", "n", "m")
    return {k: v for k, v in result.items() if k in keep}


if __name__ == "__main__":
    raise SystemExit(main())
