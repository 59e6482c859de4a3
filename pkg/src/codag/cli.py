"""Command-line front end: ``codag build-codag | solve | simulate | verify``.

Data goes to files (and verify's report to stdout when no path is given);
diagnostics go to stderr.  Exit codes:

    2  malformed input file        3  route enumeration limit
    4  non-convergence or config   5  solvers disagree
    6  verification failure
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .builder import CoDAG, build_codag, check_route_preservation, load_codag, save_codag
from .dag import verify_structure
from .equilibrium import (
    kkt_check,
    load_result,
    original_flows,
    save_result,
    solve_convex,
    solve_fixed_point,
)
from .exceptions import (
    ConfigurationError,
    CoverageError,
    DomainError,
    EnumerationLimitError,
    EstimationError,
    NetworkSchemaError,
    NotADAGError,
)
from .network import LatencyFunction, OriginalNetwork, load_network

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_SCHEMA, EXIT_LIMIT, EXIT_CONFIG, EXIT_DISAGREE, EXIT_VERIFY = 2, 3, 4, 5, 6
VERIFY_ROUTE_CAP = 100_000


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _warn(msg: str) -> None:
    print(f"codag: {msg}", file=sys.stderr)


def _dump(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# build-codag

def cmd_build_codag(args) -> int:
    net = load_network(args.network)
    g = build_codag(net, cap=args.cap, split_by=args.split_by)
    out = Path(args.out)
    save_codag(g, out)
    table = Path(args.table) if args.table else out.with_suffix(".table.txt")
    table.write_text(g.correspondence_table() + "\n")
    _warn(f"{net.n_arcs} original arcs -> {g.n_arcs} CoDAG arcs on {g.n_nodes} nodes; "
          f"wrote {out} and {table}")
    return 0


# solve

def _solve_both(g: CoDAG, beta: float, g_o: float, tol: float):
    fp = solve_fixed_point(g, beta, g_o, tol=tol * 1e-3)
    fw = solve_convex(g, beta, g_o, tol=tol * 1e-1)
    return fp, fw


def cmd_solve(args) -> int:
    g = load_codag(args.codag)
    g_o = g.demand if args.demand is None else args.demand
    tol = args.tol
    if args.method == "fp":
        res = solve_fixed_point(g, args.beta, g_o, tol=tol * 1e-3)
    elif args.method == "fw":
        res = solve_convex(g, args.beta, g_o, tol=tol * 1e-1)
    else:
        fp, res = _solve_both(g, args.beta, g_o, tol)
        diff = float(np.max(np.abs(fp.w - res.w)))
        res.info.update({"agreement": diff, "fixed_point_iterations": fp.iterations,
                         "fixed_point_converged": fp.converged, "fixed_point_F": fp.F})
        if not fp.converged:
            save_result(res, args.out, g)
            raise CommandFailed(EXIT_CONFIG, "fixed-point iteration did not converge")
        if not res.converged:
            save_result(res, args.out, g)
            raise CommandFailed(EXIT_CONFIG, "convex solver did not converge")
        if diff > 2 * tol:
            save_result(res, args.out, g)
            raise CommandFailed(EXIT_DISAGREE, f"solvers differ by {diff:.3e} > {2 * tol:g}")
    save_result(res, args.out, g)
    if not res.converged:
        raise CommandFailed(EXIT_CONFIG, f"{res.method} did not converge")
    _warn(f"{res.method}: F = {res.F:.12g}, KKT residual {res.kkt_residual:.2e}; wrote {args.out}")
    return 0


# simulate

def _resolve_network(spec: str, base: Path) -> OriginalNetwork:
    from .fixtures import data_path
    if spec == "figure1":
        return load_network(data_path("figure1.json"))
    path = Path(spec)
    return load_network(path if path.is_absolute() else base / path)


def _override_latency(net: OriginalNetwork, section: dict) -> OriginalNetwork:
    k0 = section.get("k0", [f.k0 for f in net.latencies])
    k1 = section.get("k1", [f.k1 for f in net.latencies])
    if len(k0) != net.n_arcs or len(k1) != net.n_arcs:
        raise ConfigurationError("latency overrides need one value per original arc")
    lats = tuple(LatencyFunction(float(a), float(b), f.kind, f.power)
                 for a, b, f in zip(k0, k1, net.latencies))
    return OriginalNetwork(net.n_nodes, net.tails, net.heads, lats, net.origin, net.destination,
                           net.demand, net.node_labels, net.arc_labels)


def load_scenario(path) -> dict:
    """Parse and validate a scenario file into plain values plus built objects."""
    from .dynamics import StepNoiseModel, rate_schedule
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    try:
        net = _resolve_network(str(raw["network"]), path.parent)
        if "latency" in raw:
            net = _override_latency(net, raw["latency"])
        beta = float(raw["beta"])
        demand = float(raw.get("demand", net.demand))
        steps = int(raw["steps"])
        seeds = [int(s) for s in raw.get("seeds", [0])]
        noise_cfg = raw.get("noise", {})
        rates_cfg = raw.get("rates", {})
        analysis = raw.get("analysis", {})
    except KeyError as exc:
        raise ConfigurationError(f"{path}: missing field {exc}") from None
    if not seeds:
        raise ConfigurationError("seeds list is empty")
    if not beta > 0 or not demand > 0:
        raise ConfigurationError("beta and demand must be positive")
    kind = noise_cfg.get("kind", "uniform")
    if kind == "degenerate":
        noise = StepNoiseModel.degenerate(float(noise_cfg["mean"]))
    else:
        lower = float(noise_cfg.get("lower", 0.0))
        clip = float(noise_cfg.get("clip", 1e-6))
        if lower < clip:
            _warn(f"step-size lower bound {lower:g} raised to {clip:g}")
            lower = clip
        noise = StepNoiseModel.uniform(lower, float(noise_cfg.get("upper", 0.1)))
    g = build_codag(net)
    rates = rate_schedule(g, rates_cfg.get("mode", "constant"), float(rates_cfg.get("base", 1.0)),
                          float(rates_cfg.get("ratio", 10.0)))
    noise.check_rates(rates[g.choice_nodes])
    out = Path(raw.get("output", "sim_out"))
    if not out.is_absolute():
        out = path.parent / out
    return {"codag": g, "beta": beta, "demand": demand, "steps": steps, "seeds": seeds,
            "noise": noise, "rates": rates, "output": out,
            "burn_in": float(analysis.get("burn_in", 0.5)),
            "halve_mu": bool(analysis.get("halve_mu", False)),
            "deltas": [float(d) for d in analysis.get("deltas", [])],
            "long_format": bool(analysis.get("long_format", False)),
            "raw": raw}


def _run_seeds(sc, noise, eq, tag, out: Path):
    from .dynamics import simulate
    trajs = []
    for seed in sc["seeds"]:
        tr = simulate(sc["codag"], sc["beta"], noise.with_seed(seed), sc["steps"], sc["rates"],
                      g_o=sc["demand"], eq=eq)
        tr.write_csv(out / f"{tag}seed_{seed}.csv")
        trajs.append(tr)
    return trajs


def _metrics(sc, trajs, eq):
    from .dynamics import convergence_metrics, entry_step
    burn = int(sc["burn_in"] * sc["steps"])
    try:
        m = convergence_metrics(trajs, eq, burn_in=burn)
    except EstimationError as exc:
        _warn(f"no convergence estimate: {exc}")
        return None, None
    pooled = np.mean([t.dist_sq for t in trajs], axis=0)
    d = m.to_dict(sc["deltas"])
    d["entry_step_2x_mean"] = entry_step(pooled, 2 * m.mean_sq_dist)
    return m, d


def _write_long(path: Path, g: CoDAG, trajs) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["seed", "step", "original_arc", "W"])
        for tr in trajs:
            for n in range(len(tr.F)):
                W = original_flows(g, tr.w[n])
                for k, x in enumerate(W):
                    out.writerow([tr.seed, n, g.network.arc_labels[k], repr(float(x))])


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.output:
        sc["output"] = Path(args.output)
    if args.steps is not None:
        sc["steps"] = args.steps
    if sc["steps"] < 0:
        raise ConfigurationError("steps must be nonnegative")
    g = sc["codag"]
    eq = solve_convex(g, sc["beta"], sc["demand"])
    if not eq.converged:
        raise CommandFailed(EXIT_CONFIG, "equilibrium solve did not converge")
    out = sc["output"]
    out.mkdir(parents=True, exist_ok=True)
    save_result(eq, out / "equilibrium.json", g)

    trajs = _run_seeds(sc, sc["noise"], eq, "", out)
    m, summary = _metrics(sc, trajs, eq)
    report = {"config": {k: v for k, v in sc["raw"].items()},
              "effective": {"noise": {"kind": sc["noise"].kind, "lower": sc["noise"].lower,
                                      "upper": sc["noise"].upper, "mean": sc["noise"].mean},
                            "rates": sc["rates"].tolist(), "steps": sc["steps"],
                            "config_hash": trajs[0].config_hash},
              "metrics": summary}
    if sc["halve_mu"]:
        half = _run_seeds(sc, sc["noise"].scaled(0.5), eq, "half_mu_", out)
        m2, summary2 = _metrics(sc, half, eq)
        report["metrics_half_mu"] = summary2
        if m is not None and m2 is not None:
            report["mu_ratio"] = (m.mean_sq_dist / m2.mean_sq_dist
                                  if m2.mean_sq_dist > 0 else None)
    if sc["long_format"]:
        _write_long(out / "flows_long.csv", g, trajs)
    _dump(report, out / "summary.json")
    _warn(f"{len(trajs)} trajectories of {sc['steps']} steps written to {out}")
    return 0


# verify

def cmd_verify(args) -> int:
    report = {"passed": True}
    try:
        g = load_codag(args.codag)
    except (NotADAGError, CoverageError) as exc:
        report.update(passed=False, load_error=str(exc))
        return _finish_verify(report, args)

    try:
        routes = g.routes(args.cap)
    except EnumerationLimitError:
        routes = None
    # past the cap only the per-arc and level clauses are checked
    st = verify_structure(g, g.table, g.origin, g.destination, routes=routes or [])
    report["structure"] = st.to_dict()
    report["structure"]["route_clauses_checked"] = routes is not None
    if routes is None:
        report["route_preservation"] = {"checked": False, "passed": True,
                                        "reason": f"more than {args.cap} routes"}
    else:
        rp = check_route_preservation(g, cap=args.cap)
        report["route_preservation"] = {
            "checked": True, "passed": rp.preserved,
            "missing": [list(r) for r in rp.missing[:10]], "extra": [list(r) for r in rp.extra[:10]],
            "duplicated": [list(r) for r in rp.duplicated[:10]]}
    report["passed"] = st.passed and report["route_preservation"]["passed"]

    if args.equilibrium:
        res = load_result(args.equilibrium)
        if len(res.w) != g.n_arcs:
            raise NetworkSchemaError("equilibrium file does not match the CoDAG arc count")
        kkt = kkt_check(g, res.w, res.beta, tol=args.tol, g_o=res.demand)
        report["kkt"] = kkt.to_dict()
        report["passed"] = report["passed"] and kkt.passed
    return _finish_verify(report, args)


def _finish_verify(report, args) -> int:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    if not report["passed"]:
        raise CommandFailed(EXIT_VERIFY, "verification failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="codag", description="Condensed DAG traffic assignment tools")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-codag", help="build the CoDAG of an original network")
    b.add_argument("network", help="original network JSON")
    b.add_argument("--out", required=True, help="CoDAG JSON to write")
    b.add_argument("--table", help="correspondence table path (default: <out>.table.txt)")
    b.add_argument("--split-by", choices=("depth", "height", "none"), default="depth")
    b.add_argument("--cap", type=int, default=None, help="route enumeration cap")
    b.set_defaults(func=cmd_build_codag)

    s = sub.add_parser("solve", help="compute the CoDAG equilibrium")
    s.add_argument("codag", help="CoDAG JSON")
    s.add_argument("--beta", type=float, required=True)
    s.add_argument("--demand", type=float, default=None, help="override the network demand")
    s.add_argument("--method", choices=("both", "fp", "fw"), default="both")
    s.add_argument("--tol", type=float, default=1e-7,
                   help="accuracy target; 'both' requires agreement within 2*tol")
    s.add_argument("--out", required=True, help="equilibrium JSON to write")
    s.set_defaults(func=cmd_solve)

    m = sub.add_parser("simulate", help="run the learning dynamics from a TOML scenario")
    m.add_argument("scenario")
    m.add_argument("--output", help="override the scenario output directory")
    m.add_argument("--steps", type=int, default=None, help="override the step count")
    m.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="check CoDAG structure, routes and KKT conditions")
    v.add_argument("codag")
    v.add_argument("equilibrium", nargs="?")
    v.add_argument("--tol", type=float, default=1e-7)
    v.add_argument("--cap", type=int, default=VERIFY_ROUTE_CAP)
    v.add_argument("--report", help="write the JSON report here instead of stdout")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandFailed as exc:
        _warn(str(exc))
        return exc.code
    except EnumerationLimitError as exc:
        _warn(f"route enumeration limit: {exc}")
        return EXIT_LIMIT
    except (NetworkSchemaError, NotADAGError, CoverageError, FileNotFoundError) as exc:
        _warn(f"bad input: {exc}")
        return EXIT_SCHEMA
    except (ConfigurationError, DomainError) as exc:
        _warn(f"configuration error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
