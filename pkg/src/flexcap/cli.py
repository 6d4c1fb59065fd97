"""Configuration-driven command line front end.

Subcommands cover the full workflow: ``uncset`` fits an uncertainty set from
scenario data, ``aggregate`` runs the single-feeder pipeline, ``validate``
replays a result against exact physics, ``multifeeder`` solves and combines a
feeder bundle and ``compare`` benchmarks the uncertainty-set variants.  Every
command validates its configuration before any computation and writes no
partial outputs on failure.

Exit codes: 0 success, 2 configuration error, 3 infeasible problem, 4 solver
failure, 5 invariant breach.  ``FLEXCAP_LOG`` selects the log level.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, case as case_mod, multifeeder as mf, validate as val
from .aggregator import AggregationResult, InfeasibleError, UnboundedError
from .conic import count_cones
from .resources import BessSpec

SCHEMA = "flexcap/1"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4
EXIT_INVARIANT = 5

log = logging.getLogger("flexcap")


class ConfigError(ValueError):
    pass


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("FLEXCAP_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UnboundedError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flexcap",
        description="Multi-service DER flexibility aggregation at the grid "
                    "connection point",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--seed", type=int, default=None, help="RNG seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")
        p.add_argument("--out", default=None, help="output directory override")

    p = sub.add_parser("uncset", help="fit and store an uncertainty set")
    common(p)
    p.add_argument("--kind", default=None,
                   choices=["hyperbox", "gaussian", "robust", "coverage"])
    p.add_argument("--eps", type=float, default=None)
    p.set_defaults(func=cmd_uncset)

    p = sub.add_parser("aggregate", help="solve the single-feeder aggregation")
    common(p)
    p.add_argument("--kind", default=None,
                   choices=["hyperbox", "gaussian", "robust", "coverage"])
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--no-network", action="store_true",
                   help="drop voltage/current rows (grid-unaware)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("validate", help="Monte Carlo validation of a result")
    common(p)
    p.add_argument("--strategy", default="max_flex",
                   choices=["max_flex", "zero", "random_in_set", "per_time_extreme"])
    p.add_argument("--allowance", type=float, default=0.02)
    p.add_argument("--plots", action="store_true", help="emit SVG ensembles")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("multifeeder", help="solve and combine a feeder bundle")
    common(p)
    p.add_argument("--delta", type=float, default=None,
                   help="slack-voltage half-range override")
    p.set_defaults(func=cmd_multifeeder)

    p = sub.add_parser("compare", help="compare uncertainty-set variants")
    common(p)
    p.add_argument("--eps", type=float, default=None)
    p.set_defaults(func=cmd_compare)
    return parser


# ---------------------------------------------------------------------------
# Configuration handling
# ---------------------------------------------------------------------------


def load_config(path: str) -> tuple[dict, Path]:
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise ConfigError(f"config file not found: {cfg_path}")
    try:
        doc = json.loads(cfg_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{cfg_path}: invalid JSON ({exc})")
    return doc, cfg_path.parent


def validate_run_config(doc: dict, base: Path) -> None:
    for key in ("network", "fleet", "scenarios", "horizon"):
        if key not in doc:
            raise ConfigError(f"missing config key {key!r}")
    for key in ("fleet", "scenarios", "prices"):
        if key in doc:
            p = base / str(doc[key])
            if not p.exists() and not Path(str(doc[key])).exists():
                raise ConfigError(f"referenced file not found: {doc[key]}")
    net = str(doc["network"])
    if not (base / net).exists() and not Path(net).exists() \
            and not case_mod.bundled_network_path(net).exists():
        raise ConfigError(f"network not found: {net}")
    unc = doc.get("uncertainty")
    if unc is not None:
        eps = float(unc.get("eps", 0.1))
        if not (0.0 <= eps < 1.0):
            raise ConfigError("uncertainty eps must lie in [0, 1)")
    if int(doc["horizon"]) < 1:
        raise ConfigError("horizon must be >= 1")


def _build_case(args, overrides: dict | None = None) -> tuple[case_mod.FeederCase, dict, Path]:
    doc, base = load_config(args.config)
    validate_run_config(doc, base)
    if overrides:
        unc = dict(doc.get("uncertainty") or {})
        unc.update({k: v for k, v in overrides.items() if v is not None})
        if unc:
            unc.setdefault("kind", "hyperbox")
            unc.setdefault("eps", 0.1)
            doc["uncertainty"] = unc
    try:
        case = case_mod.case_from_config(doc, base)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc))
    return case, doc, base


def _out_dir(args, doc: dict, base: Path) -> Path:
    out = Path(args.out) if args.out else base / str(doc.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, doc: dict) -> int:
    return args.seed if args.seed is not None else int(doc.get("seed", 0))


def _write_json(path: Path, doc: dict) -> None:
    tmp = tempfile.NamedTemporaryFile(
        "w", dir=path.parent, suffix=".tmp", delete=False, encoding="utf-8"
    )
    with tmp:
        json.dump(doc, tmp, indent=2, sort_keys=True)
        tmp.write("\n")
    os.replace(tmp.name, path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_uncset(args) -> int:
    case, doc, base = _build_case(args, {"kind": args.kind, "eps": args.eps})
    if case.uset is None:
        raise ConfigError("no uncertainty section and no --kind/--eps given")
    out = _out_dir(args, doc, base)
    uset = case.uset
    payload = {"schema": SCHEMA, "created": _now(), **uset.to_json()}
    _write_json(out / "uncertainty_set.json", payload)
    cov = uset.achieved_coverage
    print(f"kind={uset.kind} eps={uset.epsilon} "
          f"achieved_coverage={'n/a' if cov is None else f'{cov:.4f}'}")
    print(f"wrote {out / 'uncertainty_set.json'}")
    return EXIT_OK


def expected_cone_count(case: case_mod.FeederCase, result: AggregationResult,
                        *, network_rows: bool, delta: float) -> int | None:
    """Dimension-formula cone count; ``None`` when the fleet or options fall
    outside the formula's structure (non-BESS units, duplicated rows)."""
    if delta > 0 or not network_rows:
        return None
    if not all(isinstance(d, BessSpec) for d in case.ders):
        return None
    if any(not np.isfinite([d.p_min, d.p_max, d.q_min, d.q_max]).all()
           for d in case.ders):
        return None
    n_s = len(case.services) + (1 if case.baseload.mode == "self_dispatch" else 0)
    uset = result.problem.uset
    n_u = 1 if (uset is not None and uset.kind == "ellipsoid") else 0
    return count_cones(case.T, n_s, n_u, case.net.n_bus, case.net.n_branch,
                       len(case.ders), len(case.ders))


def result_payload(result: AggregationResult, seed: int) -> dict:
    services = {}
    for name, res in result.services.items():
        services[name] = {
            "kind": res.spec.kind,
            "E_kw": res.E.tolist(),
            "policy": res.policy.tolist(),
            "K": res.K.tolist(),
            "cost_slack": res.cost_slack.tolist(),
            "prices": res.spec.prices.tolist(),
        }
    base = result.baseload
    baseload = {"mode": base.mode}
    for key in ("p0b", "gamma0", "e0", "E0"):
        valarr = getattr(base, key)
        if valarr is not None:
            baseload[key] = np.asarray(valarr).tolist()
    if base.K0 is not None:
        baseload["K0"] = base.K0.tolist()
    if base.L0 is not None:
        baseload["L0"] = base.L0.tolist()
    return {
        "schema": SCHEMA,
        "created": _now(),
        "seed": seed,
        "status": result.status,
        "objective": result.objective,
        "cone_count": result.cone_count,
        "fingerprint": result.problem.program.fingerprint(),
        "services": services,
        "baseload": baseload,
    }


def cmd_aggregate(args) -> int:
    case, doc, base = _build_case(args, {"kind": args.kind, "eps": args.eps})
    out = _out_dir(args, doc, base)
    seed = _seed(args, doc)
    include_network = not args.no_network
    delta = float(doc.get("delta", 0.0))
    if not case.services and case.baseload.mode == "uncontrolled":
        payload = {"schema": SCHEMA, "created": _now(), "seed": seed,
                   "status": "optimal", "objective": 0.0, "cone_count": 0,
                   "fingerprint": "", "services": {}, "baseload": {"mode": "uncontrolled"}}
        _write_json(out / "result.json", payload)
        print("objective=0.0 (no services, uncontrolled baseload)")
        return EXIT_OK
    built = case.build(include_network_rows=include_network, delta=delta)
    result = _solve(built.problem)
    payload = result_payload(result, seed)
    _write_json(out / "result.json", payload)
    print(f"status={result.status} objective={result.objective:.6g}")
    for name, res in result.services.items():
        print(f"  service {name}: total E = {res.E.sum():.6g} kW "
              f"(mean {res.E.mean():.6g} kW)")
    expected = expected_cone_count(case, result, network_rows=include_network,
                                   delta=delta)
    print(f"cones={result.cone_count}"
          + (f" expected={expected}" if expected is not None else ""))
    if expected is not None and expected != result.cone_count:
        print("cone-count identity violated", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote {out / 'result.json'}")
    return EXIT_OK


def _solve(problem) -> AggregationResult:
    from .aggregator import solve_aggregation

    result = solve_aggregation(problem)
    if result.status == "numerical-limit" and not result.solution.verified:
        raise RuntimeError("solver failed independent feasibility verification")
    return result


def cmd_validate(args) -> int:
    case, doc, base = _build_case(args)
    out = _out_dir(args, doc, base)
    seed = _seed(args, doc)
    built = case.build(delta=float(doc.get("delta", 0.0)))
    result = _solve(built.problem)
    report = val.monte_carlo_validate(
        result, case, strategy=args.strategy, seed=seed,
        allowance=args.allowance, jobs=args.jobs,
    )
    report.write_json(out / "validation.json")
    report.write_csv(out / "validation.csv")
    if args.plots:
        report.plot_ensembles(out / "trajectories.svg")
    print(f"scenarios={report.n_scenarios} out_of_set={report.n_out_of_set} "
          f"({100 * report.out_of_set_rate:.2f}%) violations={report.n_violations} "
          f"({100 * report.violation_rate:.2f}%)")
    in_set_viol = report.in_set_violations()
    if in_set_viol:
        print(f"invariant breach: {in_set_viol} in-set scenarios violated "
              "hard constraints", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote {out / 'validation.json'}")
    return EXIT_OK


def cmd_multifeeder(args) -> int:
    doc, base = load_config(args.config)
    if "feeders" not in doc or not doc["feeders"]:
        raise ConfigError("bundle config needs a non-empty 'feeders' list")
    cases = []
    for entry in doc["feeders"]:
        fdoc, fbase = load_config(str(base / entry) if not Path(entry).is_absolute()
                                  else entry)
        validate_run_config(fdoc, fbase)
        try:
            cases.append(case_mod.case_from_config(fdoc, fbase))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"feeder {entry}: {exc}")
    delta = args.delta if args.delta is not None else float(doc.get("delta", 0.02))
    bundle = mf.FeederBundle(
        feeders=cases, delta=delta,
        p_max_transfo_kw=float(doc.get("p_max_transfo_kw", np.inf)),
        p_min_transfo_kw=float(doc.get("p_min_transfo_kw", -np.inf)),
    )
    results = mf.solve_feeders(bundle, jobs=args.jobs)
    combined = mf.combine_feeders(results, bundle)
    seed = _seed(args, doc)
    rng = np.random.default_rng(seed)
    breach = _containment_check(combined, rng)
    out = Path(args.out) if args.out else base / str(doc.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": SCHEMA,
        "created": _now(),
        "seed": seed,
        "objective": combined.objective,
        "E_kw": {k: v.tolist() for k, v in combined.E.items()},
        "shares_kw": {k: v.tolist() for k, v in combined.shares.items()},
        "feeders": [
            {"name": name, "objective": res.objective,
             "E_kw": {k: r.E.tolist() for k, r in res.services.items()}}
            for name, res in zip(combined.feeder_names, combined.feeder_results)
        ],
        "baseload_range_kw": {
            "lo": combined.baseload_lo.tolist(),
            "hi": combined.baseload_hi.tolist(),
        },
    }
    _write_json(out / "combined.json", payload)
    print(f"combined objective={combined.objective:.6g} over "
          f"{len(cases)} feeders (delta={delta})")
    for name, E in combined.E.items():
        print(f"  service {name}: total E = {E.sum():.6g} kW")
    if breach:
        print("invariant breach: containment sampling failed", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"wrote {out / 'combined.json'}")
    return EXIT_OK


def _containment_check(combined: mf.CombinedResult, rng, n: int = 200) -> bool:
    for _ in range(n):
        for name in combined.E:
            spec = combined.feeder_results[0].services[name].spec
            T = len(combined.E[name])
            xi = rng.standard_normal(T)
            if spec.kind in ("up", "down"):
                xi = np.abs(xi) if spec.kind == "up" else -np.abs(xi)
            xi /= max(np.linalg.norm(xi), 1e-30)
            for f in range(len(combined.feeder_results)):
                xi_f = combined.feeder_activation(name, f, xi)
                if np.linalg.norm(xi_f) > 1.0 + 1e-8:
                    return True
    return False


def cmd_compare(args) -> int:
    case, doc, base = _build_case(args, {"eps": args.eps})
    out = _out_dir(args, doc, base)
    eps = args.eps if args.eps is not None else float(
        (doc.get("uncertainty") or {}).get("eps", 0.1))
    rows = val.compare_uncertainty_sets(case, eps=eps, seed=_seed(args, doc))
    val.comparison_to_csv(rows, out / "comparison.csv")
    print(f"{'kind':<10} {'eps':>5} {'objective':>12} {'viol%':>7} {'outset%':>8}")
    for r in rows:
        print(f"{r.kind:<10} {r.eps:>5.2f} {r.objective:>12.4g} "
              f"{100 * r.violation_rate:>7.2f} {100 * r.out_of_set_rate:>8.2f}")
    print(f"wrote {out / 'comparison.csv'}")
    return EXIT_OK


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


if __name__ == "__main__":
    sys.exit(main())
