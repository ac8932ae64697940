"""Command-line front end.

Commands
--------
check-pmp          first-order conditions (multiplier search or a given one)
check-so-integral  integral second-order test along a supplied direction
check-so-pointwise quasi-pointwise test at supplied witness times
verify-needle      needle-expansion defect sweep (CSV + JSON)
geometry-selftest  randomized geometry identity suite

Exit codes: 0 = all verdicts pass, 2 = a necessary condition is violated
(candidate ruled out), 1 = execution error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import __version__
from . import geometry as geo
from . import needle as nd
from . import pmp
from . import problem as pb
from . import second_order as so
from . import selftest as st
from . import trajectory as tj
from . import variations as va
from .errors import ManocError

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_VIOLATED = 2


def _load_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _load_direction(problem, path):
    data = _load_toml(path)
    V = np.asarray(data.get("V", np.zeros(problem.n)), dtype=float)
    if "u_pieces" in data:
        pieces = [(float(p["t0"]), float(p["t1"]), np.asarray(p["value"], float))
                  for p in data["u_pieces"]]
        u = pb.ControlSignal.from_pieces(problem, pieces)
    elif "u_const" in data:
        u = pb.ControlSignal.constant(problem, np.asarray(data["u_const"], float))
    else:
        raise ManocError("direction file needs u_pieces or u_const")
    return u, V


def _load_multiplier(path):
    data = _load_toml(path)
    if "ell0" in data:  # Bolza layout
        return ("bolza", float(data["ell0"]),
                np.asarray(data.get("ell_psi1", []), dtype=float),
                np.asarray(data.get("ell_psi2", []), dtype=float))
    return ("mayer", pb.Multiplier(
        np.asarray(data["ell_phi"], dtype=float),
        np.asarray(data.get("ell_psi", []), dtype=float)))


def emit_report(results, out_path=None, csv_rows=None, csv_path=None):
    """Serialize the report with a stable field order; optional CSV sidecar.

    With --out the JSON goes to the file and a short summary table is
    printed; without it the JSON itself is printed.
    """
    report = {"version": __version__}
    report.update(results)
    text = json.dumps(report, indent=2, default=_json_default)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text + "\n")
        _print_summary(report)
    else:
        print(text)
    if csv_rows is not None and csv_path:
        with open(csv_path, "w") as fh:
            for row in csv_rows:
                fh.write(",".join(str(v) for v in row) + "\n")
    return report


def _summary_rows(prefix, obj):
    rows = []
    if isinstance(obj, dict):
        for key, val in obj.items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, dict):
                rows.extend(_summary_rows(name, val))
            elif isinstance(val, float):
                rows.append((name, f"{val:.6g}"))
            elif isinstance(val, (str, int, bool)):
                rows.append((name, str(val)))
    return rows


def _print_summary(report):
    rows = _summary_rows("", {k: v for k, v in report.items() if k != "version"})
    rows = rows[:24]  # keep it one page
    width = max((len(k) for k, _ in rows), default=0)
    for key, val in rows:
        print(f"  {key:<{width}}  {val}")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _setup(args):
    problem = pb.load_problem(args.problem)
    if args.grid:
        problem.grid_N = int(args.grid)
        problem._rhs = None
    traj = tj.integrate_state(problem, problem.x0, problem.reference_signal())
    frame = tj.build_frame(problem, traj)
    if getattr(args, "dump_trajectory", None):
        traj.to_csv(args.dump_trajectory)
    return problem, traj, frame


def _tol(args, default):
    return float(args.tol) if getattr(args, "tol", None) else default


def cmd_check_pmp(args):
    problem, traj, frame = _setup(args)
    results = {"command": "check-pmp", "problem": problem.name}
    tol_h = _tol(args, pmp.TOL_H)
    if args.multiplier:
        kind, *rest = _load_multiplier(args.multiplier)
        if kind != "mayer":
            raise ManocError("check-pmp expects a mayer-form multiplier file")
        report = pmp.pmp_residuals(problem, traj, frame, rest[0], tol_h=tol_h)
        results["pmp"] = report.to_dict()
        ok = report.verdict
    else:
        found = pmp.find_multipliers(problem, traj, frame, tol_h=tol_h)
        results["multipliers_found"] = len(found)
        results["pmp"] = [rep.to_dict() for _, rep in found]
        ok = bool(found)
    emit_report(results, args.out)
    return EXIT_PASS if ok else EXIT_VIOLATED


def cmd_check_so_integral(args):
    problem, traj, frame = _setup(args)
    u, V = _load_direction(problem, args.direction)
    results = {"command": "check-so-integral", "problem": problem.name}
    tol_so = _tol(args, so.TOL_SO)
    if isinstance(problem, pb.BolzaProblem):
        kind, ell0, ell_psi1, ell_psi2 = _load_multiplier(args.multiplier)
        if kind != "bolza":
            raise ManocError("bolza problem needs a bolza multiplier file (ell0/...)")
        report = so.bolza_second_order_lhs(
            problem, traj, frame, ell0, ell_psi1, ell_psi2, u, V, tol=tol_so)
    else:
        kind, ell = _load_multiplier(args.multiplier)
        ok_crit, bundle = va.critical_direction_check(problem, traj, frame, u, V)
        results["critical"] = bool(ok_crit)
        results["first_order_rows"] = {
            "phi": bundle.phi_rows, "psi": bundle.psi_rows,
            "I0_doubleprime": bundle.I0_dprime,
        }
        report = so.second_order_integral_lhs(problem, traj, frame, ell, bundle,
                                              tol=tol_so)
    results["second_order"] = report.to_dict()
    emit_report(results, args.out)
    return EXIT_PASS if report.verdict else EXIT_VIOLATED


def cmd_check_so_pointwise(args):
    problem, traj, frame = _setup(args)
    u, _ = _load_direction(problem, args.direction)
    kind, ell = _load_multiplier(args.multiplier)
    if kind != "mayer":
        raise ManocError("pointwise test expects a mayer-form multiplier")
    witness = _load_toml(args.witness) if args.witness else {}
    times = witness.get("times")
    if times is None:
        admissible = so.approximate_continuity_points(problem, traj, u)
        count = 2 + problem.j + problem.k
        picks = np.linspace(0.2, 0.8, count) * (len(admissible) - 1)
        times = list(admissible[np.unique(picks.astype(int))])
    data = so.pointwise_ingredients(problem, traj, frame, ell, u, times)
    results = {
        "command": "check-so-pointwise", "problem": problem.name,
        "witness": data.to_dict(),
    }
    hypotheses_ok = all(data.hypotheses.values())
    if hypotheses_ok:
        betas = witness.get("betas")
        report = so.quasi_pointwise_lhs(
            data, problem, ell, traj, frame, tol=_tol(args, so.TOL_SO),
            betas=None if betas is None else np.asarray(betas, float))
        results["second_order"] = report.to_dict()
    else:
        failed = [k for k, v in data.hypotheses.items() if not v]
        results["hypothesis_failure"] = failed
    emit_report(results, args.out)
    if not hypotheses_ok:
        return EXIT_ERROR
    return EXIT_PASS if report.verdict else EXIT_VIOLATED


def cmd_verify_needle(args):
    problem, traj, frame = _setup(args)
    u, V = _load_direction(problem, args.direction)
    eps_list = tuple(float(e) for e in args.eps.split(",")) if args.eps \
        else nd.DEFAULT_SWEEP
    sigmas = [pb.ControlSignal.constant(problem, pt)
              for pt in pb.sample_controls(problem.control_set)[:1]]
    cfg = nd.NeedleConfig(problem=problem, traj=traj, frame=frame, u=u,
                          V_chart=V, sigmas=sigmas, eps_list=eps_list)
    eps_values, defects, est = nd.sweep(cfg, order=2)
    first = [nd.variation_defect(cfg, e, order=1) for e in eps_values]
    est1 = nd.convergence_order(eps_values, first)
    rows = [("eps", "defect", "slope_so_far")]
    for i, e in enumerate(eps_values):
        partial = nd.convergence_order(eps_values[: i + 1], first[: i + 1]).slope \
            if i >= 2 else float("nan")
        rows.append((e, first[i], partial))
    results = {
        "command": "verify-needle", "problem": problem.name,
        "eps": list(eps_values),
        "first_order_defects": first,
        "first_order_slope": est1.slope,
        "second_order_defects": defects,
        "second_order_ratios": [d / e / e for d, e in zip(defects, eps_values)],
    }
    emit_report(results, args.out, csv_rows=rows, csv_path=args.csv)
    ok = est1.slope >= 1.9 or est1.exact
    return EXIT_PASS if ok else EXIT_VIOLATED


def cmd_geometry_selftest(args):
    model = geo.builtin_model(args.manifold)
    res = st.geometry_suite(model, n_samples=args.samples, seed=args.seed)
    ok, checks = st.suite_verdict(res)
    results = {
        "command": "geometry-selftest", "manifold": args.manifold,
        "samples": args.samples, "checks": checks,
        "verdict": "pass" if ok else "fail",
    }
    emit_report(results, args.out)
    return EXIT_PASS if ok else EXIT_VIOLATED


def build_parser():
    parser = argparse.ArgumentParser(
        prog="manoc",
        description="Optimality-condition checks for optimal control on "
                    "Riemannian manifolds.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem=True):
        if problem:
            p.add_argument("--problem", required=True, help="problem TOML file")
            p.add_argument("--grid", type=int, default=None, help="grid_N override")
            p.add_argument("--tol", type=float, default=None,
                           help="verdict tolerance override")
            p.add_argument("--dump-trajectory", default=None,
                           help="write the reference trajectory CSV here")
        p.add_argument("--out", default=None, help="write the JSON report here")

    p = sub.add_parser("check-pmp", help="first-order (maximum principle) checks")
    common(p)
    p.add_argument("--multiplier", default=None, help="multiplier TOML (else search)")
    p.set_defaults(fn=cmd_check_pmp)

    p = sub.add_parser("check-so-integral", help="integral second-order test")
    common(p)
    p.add_argument("--direction", required=True, help="direction TOML (V, u pieces)")
    p.add_argument("--multiplier", required=True)
    p.set_defaults(fn=cmd_check_so_integral)

    p = sub.add_parser("check-so-pointwise", help="quasi-pointwise second-order test")
    common(p)
    p.add_argument("--direction", required=True)
    p.add_argument("--multiplier", required=True)
    p.add_argument("--witness", default=None, help="witness TOML (times, betas)")
    p.set_defaults(fn=cmd_check_so_pointwise)

    p = sub.add_parser("verify-needle", help="needle-expansion defect sweep")
    common(p)
    p.add_argument("--direction", required=True)
    p.add_argument("--eps", default=None, help="comma-separated sweep values")
    p.add_argument("--csv", default=None, help="write the sweep CSV here")
    p.set_defaults(fn=cmd_verify_needle)

    p = sub.add_parser("geometry-selftest", help="geometry identity suite")
    common(p, problem=False)
    p.add_argument("--manifold", required=True,
                   help="euclidean:n | sphere2 | halfplane2")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_geometry_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ManocError, OSError) as err:
        print(f"error [{args.command}]: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
