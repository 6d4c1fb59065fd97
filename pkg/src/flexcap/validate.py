"""Out-of-sample Monte Carlo validation of an aggregation result.

For each scenario the realized driver deviation is mapped to the disaggregated
DER set points, the battery and buffer-tank states are simulated with their
exact recursions (using each service's energy-coupling factor on its power
contribution), and the exact nonlinear power flow is solved per time step.
Physical limits are checked with a small relative tolerance plus a
configurable linearization allowance on voltages and currents; a scenario
counts as one violation regardless of how many constraints fail, and scenarios
outside the uncertainty set are reported but still validated.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregator import AggregationResult, disaggregate
from .case import FeederCase
from .netmodel import PowerFlowError, solve_power_flow
from .resources import BessSpec, HpSpec, PvSpec

CATEGORIES = ("voltage", "current", "soe", "temperature", "pv_cap", "power_box",
              "pf-divergence")


@dataclass
class ScenarioOutcome:
    index: int
    in_set: bool
    flags: dict[str, bool]
    worst: dict[str, float]
    soe: dict[str, np.ndarray] = field(default_factory=dict)
    temperature: dict[str, np.ndarray] = field(default_factory=dict)
    current_delta: float = 0.0

    @property
    def violated(self) -> bool:
        return any(self.flags.values())


@dataclass
class ViolationReport:
    """Aggregate Monte Carlo statistics with per-scenario detail."""

    n_scenarios: int
    n_out_of_set: int
    n_violations: int
    per_category: dict[str, int]
    worst: dict[str, float]
    outcomes: list[ScenarioOutcome]
    seed: int
    allowance: float
    max_current_delta_rel: float

    @property
    def violation_rate(self) -> float:
        return self.n_violations / max(self.n_scenarios, 1)

    @property
    def out_of_set_rate(self) -> float:
        return self.n_out_of_set / max(self.n_scenarios, 1)

    def in_set_violations(self) -> int:
        return sum(1 for o in self.outcomes if o.in_set and o.violated)

    def to_json(self) -> dict:
        return {
            "scenarios": self.n_scenarios,
            "out_of_set": self.n_out_of_set,
            "out_of_set_rate": self.out_of_set_rate,
            "violations": self.n_violations,
            "violation_rate": self.violation_rate,
            "per_category": self.per_category,
            "worst": self.worst,
            "seed": self.seed,
            "allowance": self.allowance,
            "max_current_delta_rel": self.max_current_delta_rel,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True),
                              encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["scenario", "in_set", "violated", *CATEGORIES])
            for o in self.outcomes:
                writer.writerow([
                    o.index, int(o.in_set), int(o.violated),
                    *(int(o.flags.get(c, False)) for c in CATEGORIES),
                ])

    def plot_ensembles(self, path: str | Path) -> None:
        """SVG ensemble plot of the stored SOE and temperature trajectories."""
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        names_soe = sorted({k for o in self.outcomes for k in o.soe})
        names_tmp = sorted({k for o in self.outcomes for k in o.temperature})
        n_rows = max(1, len(names_soe) + len(names_tmp))
        fig, axes = plt.subplots(n_rows, 1, figsize=(7, 2.2 * n_rows), squeeze=False)
        row = 0
        for name in names_soe:
            ax = axes[row][0]
            for o in self.outcomes:
                ax.plot(o.soe[name], color="tab:blue", alpha=0.12, lw=0.8)
            ax.set_ylabel(f"{name} SOE [kWh]")
            row += 1
        for name in names_tmp:
            ax = axes[row][0]
            for o in self.outcomes:
                ax.plot(o.temperature[name], color="tab:red", alpha=0.12, lw=0.8)
            ax.set_ylabel(f"{name} T [K]")
            row += 1
        axes[-1][0].set_xlabel("time step")
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)


# ---------------------------------------------------------------------------
# Activation strategies
# ---------------------------------------------------------------------------


def activation_strategies(result: AggregationResult) -> dict[str, object]:
    """Named selectors of admissible activations.

    ``max_flex`` returns the boundary point maximizing the total offered
    power; ``zero`` no activation; ``random_in_set`` uniform admissible draws;
    ``per_time_extreme`` a single-step unit activation cycling with the draw.
    """
    services = result.services

    def _direction(spec, E):
        d = E / max(np.linalg.norm(E), 1e-30) if np.linalg.norm(E) > 0 else np.zeros_like(E)
        return -d if spec.kind == "down" else d

    def max_flex(rng=None):
        return {name: _direction(res.spec, res.E) for name, res in services.items()}

    def zero(rng=None):
        return {name: np.zeros(len(res.E)) for name, res in services.items()}

    def random_in_set(rng):
        out = {}
        for name, res in services.items():
            T = len(res.E)
            g = rng.standard_normal(T)
            if res.spec.kind in ("up", "down"):
                g = np.abs(g) * (1.0 if res.spec.kind == "up" else -1.0)
            g /= max(np.linalg.norm(g), 1e-30)
            out[name] = g * rng.random() ** (1.0 / T)
        return out

    def per_time_extreme(rng):
        out = {}
        for name, res in services.items():
            T = len(res.E)
            t = int(rng.integers(T))
            xi = np.zeros(T)
            xi[t] = -1.0 if res.spec.kind == "down" else 1.0
            out[name] = xi
        return out

    return {
        "max_flex": max_flex,
        "zero": zero,
        "random_in_set": random_in_set,
        "per_time_extreme": per_time_extreme,
    }


# ---------------------------------------------------------------------------
# Monte Carlo validation
# ---------------------------------------------------------------------------


def monte_carlo_validate(
    result: AggregationResult,
    case: FeederCase,
    *,
    strategy: str = "max_flex",
    which_scenarios: str = "out",
    seed: int = 0,
    allowance: float = 0.02,
    rel_tol: float = 1e-4,
    state_tol: float = 1e-6,
    ampacity_factor: float = 1.0,
    keep_trajectories: bool = True,
    jobs: int = 1,
) -> ViolationReport:
    """Validate a result against exact physics on sampled scenarios.

    Voltage and current limits allow a relative ``rel_tol`` plus the
    linearization ``allowance``; state and power bounds use an absolute
    ``state_tol`` scaled by the bound magnitude.  Power-flow divergence is
    recorded as its own violation category.
    """
    zetas = case.scenarios.deviations(which_scenarios)
    strategies = activation_strategies(result)
    if strategy not in strategies:
        raise ValueError(f"unknown activation strategy {strategy!r}")
    pick = strategies[strategy]
    net = case.net if ampacity_factor == 1.0 else case.net.with_ampacity_scale(ampacity_factor)
    rng_master = np.random.default_rng(seed)
    scenario_seeds = rng_master.integers(0, 2**63 - 1, size=len(zetas))

    def run(k: int) -> ScenarioOutcome:
        rng = np.random.default_rng(scenario_seeds[k])
        activations = pick(rng)
        return _evaluate_scenario(
            result, case, net, int(k), zetas[k], activations,
            allowance=allowance, rel_tol=rel_tol, state_tol=state_tol,
            keep_trajectories=keep_trajectories,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, range(len(zetas))))
    else:
        outcomes = [run(k) for k in range(len(zetas))]
    outcomes.sort(key=lambda o: o.index)

    per_category = {c: sum(o.flags.get(c, False) for o in outcomes) for c in CATEGORIES}
    worst: dict[str, float] = {}
    for c in CATEGORIES:
        vals = [o.worst.get(c, 0.0) for o in outcomes]
        worst[c] = float(max(vals)) if vals else 0.0
    return ViolationReport(
        n_scenarios=len(outcomes),
        n_out_of_set=sum(not o.in_set for o in outcomes),
        n_violations=sum(o.violated for o in outcomes),
        per_category=per_category,
        worst=worst,
        outcomes=outcomes,
        seed=seed,
        allowance=allowance,
        max_current_delta_rel=float(max((o.current_delta for o in outcomes),
                                        default=0.0)),
    )


def _evaluate_scenario(result, case, net, index, zeta, activations, *,
                       allowance, rel_tol, state_tol, keep_trajectories):
    problem = result.problem
    T, n_c = problem.index.T, problem.index.n_c
    in_set = problem.uset.contains(zeta) if problem.uset is not None else True
    flags = {c: False for c in CATEGORIES}
    worst = {c: 0.0 for c in CATEGORIES}
    outcome = ScenarioOutcome(index, in_set, flags, worst)

    dis = disaggregate(result, activations, zeta)
    coupling = {name: res.spec.energy_coupling for name, res in result.services.items()}

    def coord(kind: str, t: int, slot: int) -> int:
        return (0 if kind == "p" else n_c * T) + t * n_c + slot

    # effective per-slot power: base plus coupled service contributions
    p_eff = np.zeros((n_c, T))
    p_full = np.zeros((n_c, T))
    q_full = np.zeros((n_c, T))
    for slot in range(n_c):
        for t in range(T):
            base = dis.baseload_injections[coord("p", t, slot)]
            p_eff[slot, t] = base
            p_full[slot, t] = base
            q_full[slot, t] = dis.baseload_injections[coord("q", t, slot)]
            for name, u_s in dis.service_injections.items():
                p_eff[slot, t] += coupling[name] * u_s[coord("p", t, slot)]
                p_full[slot, t] += u_s[coord("p", t, slot)]
                q_full[slot, t] += u_s[coord("q", t, slot)]

    def breach(cat: str, magnitude: float):
        flags[cat] = True
        worst[cat] = max(worst[cat], float(magnitude))

    # exact resource recursions
    for slot, der in enumerate(case.ders):
        if isinstance(der, BessSpec):
            soe = np.empty(T + 1)
            soe[0] = der.initial_soe
            for t in range(T):
                soe[t + 1] = soe[t] - p_eff[slot, t] * case.dt_hours
            tol = state_tol * max(1.0, der.soe_max)
            if np.any(soe < der.soe_min - tol) or np.any(soe > der.soe_max + tol):
                breach("soe", max(np.max(der.soe_min - soe), np.max(soe - der.soe_max)))
            lo, hi = der.p_min, der.p_max
            if np.any(p_full[slot] < lo - state_tol * max(1, abs(lo))) or \
               np.any(p_full[slot] > hi + state_tol * max(1, abs(hi))):
                breach("power_box", max(np.max(lo - p_full[slot]),
                                        np.max(p_full[slot] - hi)))
            if keep_trajectories:
                outcome.soe[der.label] = soe
        elif isinstance(der, HpSpec):
            t_inf0 = (np.full(T, der.t_comfort) if der.t_inf0 is None
                      else np.asarray(der.t_inf0, float))
            H = der.H if der.H is not None else np.zeros((T, len(zeta)))
            t_inf = t_inf0 + H @ zeta
            kappa = der.kelvin_per_kwh() * case.dt_hours
            temp = np.empty(T + 1)
            temp[0] = der.initial_temperature
            for t in range(T):
                p_hp = -p_eff[slot, t]  # consumption
                q_hp = der.a_hp * p_hp + der.q0_hp
                q_dem = der.h_demand * (der.t_comfort - t_inf[t])
                temp[t + 1] = temp[t] + kappa * (q_hp - q_dem - der.l_bt)
            tol = state_tol * max(1.0, der.t_max)
            if np.any(temp < der.t_min - tol) or np.any(temp > der.t_max + tol):
                breach("temperature", max(np.max(der.t_min - temp),
                                          np.max(temp - der.t_max)))
            cons = -p_full[slot]
            if np.any(cons < der.p_min - state_tol) or np.any(cons > der.p_max + state_tol):
                breach("power_box", max(np.max(der.p_min - cons),
                                        np.max(cons - der.p_max)))
            if keep_trajectories:
                outcome.temperature[der.label] = temp
        elif isinstance(der, PvSpec):
            mpp = np.asarray(der.mpp0, float).copy()
            if der.M_pv is not None:
                mpp = mpp + der.M_pv @ zeta
            tol = state_tol * max(1.0, float(np.max(np.abs(mpp), initial=1.0)))
            if np.any(p_full[slot] > mpp + tol) or np.any(p_full[slot] < -tol):
                breach("pv_cap", max(np.max(p_full[slot] - mpp),
                                     np.max(-p_full[slot])))

    # exact power flow per time step
    uncontrollable = case.bus_injections(zeta)
    s_base = net.base_kva
    slots = [net.bus_index(b) for b in case.controllable_buses]
    linear_grid = problem.grid
    for t in range(T):
        inj = uncontrollable[:, t].copy()
        for slot, bus_idx in enumerate(slots):
            inj[bus_idx] += complex(p_full[slot, t], q_full[slot, t]) / s_base
        try:
            sol = solve_power_flow(net, inj, linear_grid.slack_voltage)
        except PowerFlowError:
            breach("pf-divergence", 1.0)
            continue
        vm = sol.voltage_magnitudes
        v_hi = net.v_max * (1.0 + rel_tol + allowance)
        v_lo = net.v_min * (1.0 - rel_tol - allowance)
        if np.any(vm > v_hi) or np.any(vm < v_lo):
            breach("voltage", max(np.max(vm - v_hi), np.max(v_lo - vm)))
        im = sol.current_magnitudes
        i_hi = net.i_max * (1.0 + rel_tol + allowance)
        if np.any(im > i_hi):
            breach("current", np.max(im - i_hi))
        if linear_grid.Ki_t.shape[1]:
            u_t = np.zeros(2 * len(slots))
            u_t[:len(slots)] = p_full[:, t] / s_base
            u_t[len(slots):] = q_full[:, t] / s_base
            zeta_col = zeta if problem.index.n_zeta else None
            pred = linear_grid.Ki_t[t] @ u_t + linear_grid.d0[t]
            if zeta_col is not None and linear_grid.n_zeta:
                pred = pred + linear_grid.Md[t] @ zeta_col
            # the signed surrogate encodes reversed flows as negative values
            scale = np.maximum(net.i_max, 1e-9)
            outcome.current_delta = max(
                outcome.current_delta,
                float(np.max(np.abs(np.abs(pred) - im) / scale)),
            )
    return outcome


# ---------------------------------------------------------------------------
# Uncertainty-set comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    kind: str
    eps: float
    objective: float
    violation_rate: float
    out_of_set_rate: float
    status: str


def compare_uncertainty_sets(
    case: FeederCase,
    kinds: list[str] = ("hyperbox", "coverage", "robust", "gaussian"),
    *,
    eps: float = 0.1,
    strategy: str = "max_flex",
    seed: int = 0,
    allowance: float = 0.02,
    solve_kw: dict | None = None,
) -> list[ComparisonRow]:
    """Solve and validate the same case once per uncertainty-set kind."""
    rows = []
    solve_kw = dict(solve_kw or {})
    ampacity_factor = float(solve_kw.get("ampacity_factor", 1.0))
    for kind in kinds:
        try:
            uset = case.fit_uncertainty(kind, eps if kind != "robust" else 0.0)
            res = case.solve(uset=uset, **solve_kw)
            report = monte_carlo_validate(
                res, case, strategy=strategy, seed=seed, allowance=allowance,
                ampacity_factor=ampacity_factor, keep_trajectories=False,
            )
            rows.append(ComparisonRow(kind, uset.epsilon, res.objective,
                                      report.violation_rate,
                                      report.out_of_set_rate, res.status))
        except Exception as exc:  # propagate per-row failures into the table
            rows.append(ComparisonRow(kind, eps, float("nan"), float("nan"),
                                      float("nan"), f"error: {exc}"))
    return rows


def comparison_to_csv(rows: list[ComparisonRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "eps", "objective", "violation_rate",
                         "out_of_set_rate", "status"])
        for r in rows:
            writer.writerow([r.kind, r.eps, r.objective, r.violation_rate,
                             r.out_of_set_rate, r.status])
