"""Command-line entry points.

Verbs: ``run`` a scenario file, ``sweep`` one parameter axis, ``verify`` the
built-in check suites, ``modes`` (kernel and temporal-mode extraction only),
and ``condition`` (re-condition a finished run at new homodyne outcomes).
Exit codes: 0 success, 1 failed verification checks, 2 configuration or
validation failure, 3 numerical guard failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .acceptance import verify
from .conditioning import condition_on_homodyne, negativity, purity, wigner
from .fock import DensityOperator, ModeLayout
from .scenario import (
    OUTPUT_ROOT_ENV,
    ScenarioConfig,
    ValidationError,
    build_schedules,
    run_scenario,
    sweep,
    _write_wigner,
)
from .trajectories import DimensionGuardError, NormUnderflowError, StepControlError

GUARD_ERRORS = (DimensionGuardError, StepControlError, NormUnderflowError)


def _load_config(path, args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(path)
    doc = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        doc["ensemble"]["master_seed"] = args.seed
    if getattr(args, "traj", None) is not None:
        doc["ensemble"]["n_traj"] = args.traj
    return ScenarioConfig.from_dict(doc)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config, args)
    rep = run_scenario(cfg, out_dir=args.out, workers=args.workers)
    print(f"run complete: method={rep.method}, out={rep.out_dir}, "
          f"wall={rep.wall_seconds:.1f}s")
    for key, val in sorted(rep.leakage.items()):
        print(f"  top-level population {key}: {val:.3e}")
    if rep.conditioning:
        print(f"  conditioning: negativity={rep.conditioning['negativity']:.4f}, "
              f"weight={rep.conditioning['success_weight']:.3e}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args)
    values = [float(v) for v in args.values.split(",")]
    rows, _ = sweep(cfg, args.axis, values, out_root=args.out, workers=args.workers)
    print(f"sweep complete: {len(rows)} runs")
    return 0


def _cmd_verify(args) -> int:
    results = verify(args.suite)
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return 0 if n_fail == 0 else 1


def _cmd_modes(args) -> int:
    cfg = _load_config(args.config, args)
    doc = cfg.to_dict()
    doc["coupling"]["mode"] = "most_populated"
    doc["model"]["include_virtual"] = True
    cfg = ScenarioConfig.from_dict(doc)
    out = args.out or os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"),
                                   (cfg.name or "scenario") + "_modes")
    os.makedirs(out, exist_ok=True)
    _, meta = build_schedules(cfg, out_dir=out)
    for k, m in enumerate(meta, start=1):
        print(f"mode {k}: occupation={m['occupation']:.6g}, "
              f"clamped_fraction={m['clamped_fraction']:.3g}")
    print(f"kernel and mode files in {out}")
    return 0


def _cmd_condition(args) -> int:
    run_dir = args.run_dir
    rho_path = os.path.join(run_dir, "rho_virtual_final.npy")
    rep_path = os.path.join(run_dir, "report.json")
    if not (os.path.exists(rho_path) and os.path.exists(rep_path)):
        raise ValidationError(
            f"{run_dir} is not a completed run with virtual-mode output "
            "(need rho_virtual_final.npy and report.json)"
        )
    with open(rep_path) as fh:
        rep = json.load(fh)
    d_virtual = rep["config"]["truncation"]["d_virtual"]
    rho = DensityOperator(ModeLayout((d_virtual,) * 3), np.load(rho_path),
                          validate=False)
    rho_c, weight = condition_on_homodyne(rho, args.x1, args.x2)
    wg = wigner(rho_c, points=args.points, extent=args.extent, auto_extend=True)
    neg = negativity(wg)
    tag = f"x1_{args.x1:g}_x2_{args.x2:g}"
    _write_wigner(os.path.join(run_dir, f"wigner_{tag}.csv"), wg, neg)
    print(f"conditioned at (x1={args.x1}, x2={args.x2}): negativity={neg:.4f}, "
          f"success_weight={weight:.3e}, purity={purity(rho_c):.4f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ntpdsim",
        description="Triple-photon downconversion cascade simulator",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run one scenario file")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, help="override the master seed")
    p_run.add_argument("--traj", type=int, help="override the trajectory count")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV})")
    p_run.set_defaults(fn=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario per axis value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=("beta", "gamma", "g"))
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--traj", type=int)
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.add_argument("--out")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_ver = sub.add_parser("verify", help="run built-in verification suites")
    p_ver.add_argument("--suite", default="all",
                       choices=("oracle", "witness", "conditioning", "all"))
    p_ver.set_defaults(fn=_cmd_verify)

    p_modes = sub.add_parser("modes", help="kernel and temporal-mode extraction only")
    p_modes.add_argument("config")
    p_modes.add_argument("--seed", type=int)
    p_modes.add_argument("--traj", type=int)
    p_modes.add_argument("--out")
    p_modes.set_defaults(fn=_cmd_modes)

    p_cond = sub.add_parser("condition", help="re-condition a finished run")
    p_cond.add_argument("run_dir")
    p_cond.add_argument("--x1", type=float, required=True)
    p_cond.add_argument("--x2", type=float, required=True)
    p_cond.add_argument("--points", type=int, default=256)
    p_cond.add_argument("--extent", type=float, default=5.0)
    p_cond.set_defaults(fn=_cmd_condition)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 2
    except GUARD_ERRORS as exc:
        print(f"numerical guard failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
