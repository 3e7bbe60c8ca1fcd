"""Command line entry point: ``dmrbsde <command> --config scenario.yaml``.

Exit codes: 0 success, 1 configuration or admissibility error, 2 convergence
failure, 3 invariant violation.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from dmrbsde import __version__
from dmrbsde._parallel import set_threads
from dmrbsde.boundaries import InducedBoundary, mean_loss
from dmrbsde.config import parse_scenario
from dmrbsde.diagnostics import build_report, dynkin_value, sandwich_check
from dmrbsde.dmr import constraint_tolerance, fixed_k_pass, picard_solve
from dmrbsde.errors import ConfigError, DmrError, InvariantViolation
from dmrbsde.grid import sample_ensemble, tree_mean
from dmrbsde.outputs import read_csv, write_outputs
from dmrbsde.penalized import convergence_sweep, penalized_solve
from dmrbsde.skorokhod import (EPS_ROOT_INDUCED, audit_backward, boundary_roots, solve_backward_sp,
                               solve_forward_sp)

log = logging.getLogger("dmrbsde")

SOLUTION_COLUMNS = ("t", "meanY", "K", "K_R", "K_L", "EL", "ER")
SWEEP_COLUMNS = ("n", "pen_l", "pen_r", "dist_to_ref", "supY2", "intZ2")

USED = {
    "skorokhod": {"grid", "skorokhod", "output"},
    "solve": {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "output"},
    "penalize": {"grid", "ensemble", "xi", "driver", "losses", "regression", "penalization", "output"},
    "sweep": {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "penalization", "output"},
    "compare": {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "penalization", "output"},
    "dynkin": {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "dynkin", "output"},
    "sandwich": {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "sandwich", "output"},
    "validate": {"grid", "ensemble", "xi", "driver", "losses", "regression", "picard", "output"},
}


def _base_summary(cfg, command):
    summary = {
        "command": command,
        "version": __version__,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "grid": {"T": cfg.grid.T, "N": cfg.grid.N},
        "M": cfg.M,
        "scenario": cfg.raw,
    }
    if cfg.obstacles is not None and cfg.obstacles.relax_origin:
        # obstacles may start away from 0; convergence of the penalized scheme is not covered there
        summary["origin_relaxed"] = True
    return summary


def _setup(cfg):
    missing = [sec for sec, val in (("xi", cfg.xi), ("losses", cfg.losses)) if val is None]
    if missing:
        raise ConfigError([f"{sec}: section is required for this command" for sec in missing])
    ens = sample_ensemble(cfg.grid, cfg.M, cfg.seed, cfg.antithetic)
    return ens, cfg.xi_values(ens)


def _need_linear(cfg, command):
    if cfg.mode != "linear":
        raise ConfigError(f"{command} needs losses.mode: linear (penalization is defined for linear obstacles)")


def _eps_flat(sol):
    return 10.0 * sol.residuals["eps_root"] * max(sol.total_variation, 1.0)


def _mean_bounds(sol, losses, ens):
    """Interval ``[lower, upper]`` the mean must stay in, given the shape of ``Y``."""
    lo = boundary_roots(InducedBoundary(sol.Y, losses.R, ens), ens.grid.times, EPS_ROOT_INDUCED)
    hi = boundary_roots(InducedBoundary(sol.Y, losses.L, ens), ens.grid.times, EPS_ROOT_INDUCED)
    return lo, hi


def cmd_skorokhod(cfg):
    sk = cfg.skorokhod
    if sk is None:
        raise ConfigError("skorokhod command needs a 'skorokhod' section")
    times = cfg.grid.times
    s = np.asarray(sk["s"](times), dtype=float)
    if sk["direction"] == "forward":
        sol = solve_forward_sp(s, sk["upper"], sk["lower"], times, sk["eps_root"])
        audit = {"feasibility": sol.feasibility()}
    else:
        sol = solve_backward_sp(s, sk["a"], sk["upper"], sk["lower"], times, sk["eps_root"])
        band = (min(sk["upper"].band[0], sk["lower"].band[0]), max(sk["upper"].band[1], sk["lower"].band[1]))
        audit = audit_backward(sol, band)
    table = np.column_stack([times, sol.s, sol.x, sol.k, sol.k_up, sol.k_down, sol.phi, sol.psi])
    summary = _base_summary(cfg, "skorokhod")
    summary.update({"direction": sk["direction"], "eps_root": sk["eps_root"], "audit": audit,
                    "total_variation": sol.total_variation})
    ok = audit.get("feasible", True) and audit.get("flatoff_ok", True) and audit.get("monotone", True)
    return {"tables": {"skorokhod": (("t", "s", "x", "k", "k_up", "k_down", "phi", "psi"), table)},
            "summary": summary}, ok


def _solve(cfg, ens, xi):
    return picard_solve(ens, cfg.driver, xi, cfg.losses, cfg.picard, cfg.regression, EPS_ROOT_INDUCED)


def _solution_tables(cfg, sol, ens):
    times = ens.grid.times
    lo, hi = _mean_bounds(sol, cfg.losses, ens)
    return {
        "solution": (SOLUTION_COLUMNS, np.column_stack([times, sol.meanY, sol.K, sol.K_R, sol.K_L, sol.EL, sol.ER])),
        "plot_mean": (("t", "meanY", "mean_lower", "mean_upper"), np.column_stack([times, sol.meanY, lo, hi])),
        "plot_K": (("t", "K", "K_R", "K_L"), np.column_stack([times, sol.K, sol.K_R, sol.K_L])),
    }


def _audit(sol):
    r = sol.residuals
    eps_flat = _eps_flat(sol)
    checks = {
        "constraints": r["violation_sup"] <= r["constraint_tol"],
        "flatoff_R": r["flatoff_R"] <= eps_flat,
        "flatoff_L": r["flatoff_L"] <= eps_flat,
        "identity": r["identity_error"] <= 1e-10,
    }
    return checks, eps_flat


def cmd_solve(cfg):
    ens, xi = _setup(cfg)
    sol = _solve(cfg, ens, xi)
    report = build_report(sol, cfg.driver, xi, cfg.losses, ens, cfg.regression, 0)
    checks, eps_flat = _audit(sol)
    summary = _base_summary(cfg, "solve")
    summary.update({"iterations": sol.iterations, "delta_trace": sol.residuals["delta_trace"],
                    "residuals": sol.residuals, "eps_flat": eps_flat, "checks": checks,
                    "diagnostics": report.to_dict(), "total_variation": sol.total_variation})
    return {"tables": _solution_tables(cfg, sol, ens), "summary": summary}, all(checks.values())


def cmd_penalize(cfg):
    _need_linear(cfg, "penalize")
    ens, xi = _setup(cfg)
    sol = penalized_solve(ens, cfg.driver, xi, cfg.obstacles, cfg.n, cfg.regression)
    times = ens.grid.times
    summary = _base_summary(cfg, "penalize")
    summary.update({"n": sol.n, "pen_l": sol.penetration[0], "pen_r": sol.penetration[1],
                    "K_l_T": float(sol.K_l[-1]), "K_r_T": float(sol.K_r[-1])})
    table = np.column_stack([times, sol.meanY, sol.l, sol.r, sol.K_l, sol.K_r])
    return {"tables": {"penalized": (("t", "meanY", "l", "r", "K_l", "K_r"), table)}, "summary": summary}, True


def _sweep(cfg, command):
    _need_linear(cfg, command)
    ens, xi = _setup(cfg)
    ref = _solve(cfg, ens, xi)
    sw = convergence_sweep(ens, cfg.driver, xi, cfg.obstacles, cfg.n_list, cfg.regression, reference=ref,
                           keep_solutions=command == "compare")
    summary = _base_summary(cfg, command)
    summary.update({"slope_r": sw.slope_r, "slope_l": sw.slope_l, "cauchy": sw.cauchy,
                    "reference_iterations": ref.iterations, "rows": sw.rows})
    return ens, ref, sw, summary


def cmd_sweep(cfg):
    _, _, sw, summary = _sweep(cfg, "sweep")
    return {"tables": {"sweep": (SWEEP_COLUMNS, sw.table())}, "summary": summary}, True


def cmd_compare(cfg):
    ens, ref, sw, summary = _sweep(cfg, "compare")
    dist = [r["dist_to_ref"] for r in sw.rows]
    # monotone decrease, allowing each step 20% of noise
    monotone = all(b <= 1.2 * a for a, b in zip(dist, dist[1:]))
    summary["monotone_within_noise"] = monotone
    cauchy = [float("nan")] + sw.cauchy
    table = np.column_stack([[r["n"] for r in sw.rows], dist, [r["pen_l"] for r in sw.rows],
                             [r["pen_r"] for r in sw.rows], cauchy])
    names = ["t", "picard"] + [f"n_{int(r['n']) if float(r['n']).is_integer() else r['n']}" for r in sw.rows]
    per_time = np.column_stack([ens.grid.times, ref.meanY] + [s.meanY for s in sw.solutions])
    return {"tables": {"compare": (("n", "dist_to_ref", "pen_l", "pen_r", "cauchy"), table),
                       "compare_meanY": (tuple(names), per_time)}, "summary": summary}, True


def cmd_dynkin(cfg):
    ens, xi = _setup(cfg)
    sol = _solve(cfg, ens, xi)
    rows, bars = [], None
    for t in cfg.dynkin_times:
        g = dynkin_value(sol, cfg.driver, xi, cfg.losses, ens, cfg.grid.index_of(t), cfg.regression)
        rows.append([t, g.supinf, g.infsup, g.meanY, g.tol_game, float(g.consistent), float(g.ordering_ok)])
        if bars is None:
            bars = np.column_stack([ens.grid.times, g.rbar, sol.meanY, g.lbar])
    summary = _base_summary(cfg, "dynkin")
    summary.update({"iterations": sol.iterations, "games": [dict(zip(
        ("t", "supinf", "infsup", "meanY", "tol_game", "consistent", "ordering_ok"), r)) for r in rows]})
    ok = all(r[5] == 1.0 and r[6] == 1.0 for r in rows)
    return {"tables": {"dynkin": (("t", "supinf", "infsup", "meanY", "tol_game", "consistent", "ordering_ok"),
                                  np.array(rows)),
                       "dynkin_bars": (("t", "rbar", "meanY", "lbar"), bars)}, "summary": summary}, ok


def cmd_sandwich(cfg):
    ens, xi = _setup(cfg)
    res = sandwich_check(ens, cfg.driver, xi, cfg.losses, cfg.picard, cfg.regression,
                         cfg.sandwich["construction"], cfg.sandwich["margins"])
    summary = _base_summary(cfg, "sandwich")
    summary.update({"status": res.status, "witness": res.witness, "construction": cfg.sandwich["construction"]})
    table = np.column_stack([ens.grid.times, res.lower.meanY, res.full.meanY, res.upper.meanY])
    return {"tables": {"sandwich": (("t", "lower", "full", "upper"), table)}, "summary": summary}, \
        res.status != "violated"


def cmd_validate(cfg, solution_dir):
    """Re-audit a stored solution: K structure, rebuilt Y, constraints and flat-off."""
    summ_path = os.path.join(solution_dir, "summary.json")
    try:
        with open(summ_path) as fh:
            stored = json.load(fh)
    except (OSError, ValueError) as exc:
        raise InvariantViolation(f"cannot read {summ_path}: {exc}") from exc
    if stored.get("config_hash") != cfg.config_hash:
        raise ConfigError(f"solution in {solution_dir} was produced by a different scenario "
                          f"(hash {stored.get('config_hash')!r} != {cfg.config_hash!r})")
    cols = read_csv(os.path.join(solution_dir, "solution.csv"), SOLUTION_COLUMNS)
    times = cfg.grid.times
    if len(cols["t"]) != len(times) or np.max(np.abs(cols["t"] - times)) > 1e-12:
        raise InvariantViolation("solution grid does not match the scenario grid")
    K, K_R, K_L = cols["K"], cols["K_R"], cols["K_L"]
    scale = max(1.0, float(np.max(np.abs(K))))
    problems = []
    if K_R[0] != 0.0 or K_L[0] != 0.0:
        problems.append("K_R and K_L must start at 0")
    if np.any(np.diff(K_R) < -1e-14 * scale) or np.any(np.diff(K_L) < -1e-14 * scale):
        problems.append("K_R and K_L must be nondecreasing")
    dec = float(np.max(np.abs(K - K[0] - (K_R - K_L))))
    if dec > 1e-12 * scale:
        problems.append(f"K != K_R - K_L (max deviation {dec:.3e})")

    ens, xi = _setup(cfg)
    Y, _ = fixed_k_pass(ens, cfg.driver, xi, K, cfg.regression, tol=min(cfg.picard.tol, 1e-12))
    meanY = tree_mean(Y)
    EL, ER = mean_loss(cfg.losses.L, Y, ens), mean_loss(cfg.losses.R, Y, ens)
    tol = constraint_tolerance(Y, cfg.losses, ens, EPS_ROOT_INDUCED)
    viol = float(np.max(np.maximum(np.maximum(EL, 0.0), np.maximum(-ER, 0.0))))
    if viol > tol:
        k = int(np.argmax(np.maximum(EL, -ER)))
        problems.append(f"constraint violated by {viol:.3e} > tol {tol:.3e} at t={times[k]:.6g}")
    tv = float(K_R[-1] + K_L[-1])
    eps_flat = 10.0 * EPS_ROOT_INDUCED * max(tv, 1.0)
    fR = float(abs(np.sum(ER[:-1] * np.diff(K_R))))
    fL = float(abs(np.sum(EL[:-1] * np.diff(K_L))))
    if fR > eps_flat:
        problems.append(f"flat-off residual for K_R {fR:.3e} exceeds {eps_flat:.3e}")
    if fL > eps_flat:
        problems.append(f"flat-off residual for K_L {fL:.3e} exceeds {eps_flat:.3e}")
    mean_tol = 1e-6 + np.sqrt(cfg.picard.tol)
    dm = float(np.max(np.abs(meanY - cols["meanY"])))
    if dm > mean_tol:
        problems.append(f"stored meanY differs from the rebuilt one by {dm:.3e}")
    summary = _base_summary(cfg, "validate")
    summary.update({"solution_dir": os.path.abspath(solution_dir), "problems": problems, "violation_sup": viol,
                    "constraint_tol": tol, "flatoff_R": fR, "flatoff_L": fL, "eps_flat": eps_flat,
                    "meanY_deviation": dm})
    return {"tables": {}, "summary": summary}, not problems, problems


COMMANDS = {"skorokhod": cmd_skorokhod, "solve": cmd_solve, "penalize": cmd_penalize, "sweep": cmd_sweep,
            "compare": cmd_compare, "dynkin": cmd_dynkin, "sandwich": cmd_sandwich}


def build_parser():
    p = argparse.ArgumentParser(prog="dmrbsde", description="Mean-reflected BSDE lab.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["validate"]:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="scenario YAML file")
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed", type=int, help="override ensemble.seed")
        sp.add_argument("--threads", type=int, default=1, help="worker threads; never changes outputs")
        if name == "validate":
            sp.add_argument("--solution", help="directory holding solution.csv and summary.json "
                                               "(defaults to the output directory)")
    return p


def run(argv=None):
    args = build_parser().parse_args(argv)
    set_threads(args.threads)
    cfg = parse_scenario(args.config, seed=args.seed)
    unused = sorted(set(cfg.sections) - USED[args.command])
    if unused:
        log.warning("sections ignored by %s: %s", args.command, ", ".join(unused))
    out_dir = args.out or cfg.output_dir
    if args.command == "validate":
        results, ok, problems = cmd_validate(cfg, args.solution or out_dir)
        write_outputs({"tables": {}, "summary": results["summary"]}, os.path.join(out_dir, "validation"),
                      cfg.formats)
        if not ok:
            raise InvariantViolation("validation failed: " + "; ".join(problems))
        return 0
    results, ok = COMMANDS[args.command](cfg)
    write_outputs(results, out_dir, cfg.formats)
    if not ok:
        raise InvariantViolation(f"{args.command}: audit failed; see {os.path.join(out_dir, 'summary.json')}")
    return 0


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except DmrError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
