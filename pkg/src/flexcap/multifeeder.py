"""Feeder decomposition and substation-level combination.

Large networks fed from one primary substation are split per feeder: each
feeder's aggregation problem is solved independently with its voltage and
current rows duplicated at slack voltages ``1 - delta`` and ``1 + delta``
(robust slack-voltage decoupling), and the resulting per-service feeder
ellipsoids are then combined under the substation transformer rating.

The combination keeps each feeder's share of the substation activation
diagonal in time (every feeder delivers a fixed fraction of each time step's
activation).  This restriction makes the feeder-containment condition
``||E_f^-1 (B1 D^-1 E + B2 K) xi|| <= 1`` exact and linear: the share of
feeder ``f`` at time ``t`` may not exceed its own capacity ``E_f(t)``, and the
substation capacity is the sum of the shares.  Zero-capacity time steps are
excluded from a feeder's share instead of inverting zero.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .aggregator import (
    AggregationError,
    AggregationResult,
    InfeasibleError,
    disaggregate,
    solve_aggregation,
)
from .case import FeederCase
from .conic import ConicProgram


@dataclass
class FeederBundle:
    """Feeders behind one substation transformer.

    ``delta`` is the slack-voltage half-range used to decouple the feeders;
    transformer limits are on the total GCP active power, export-positive.
    """

    feeders: list[FeederCase]
    delta: float = 0.02
    p_max_transfo_kw: float = np.inf
    p_min_transfo_kw: float = -np.inf

    def __post_init__(self):
        if self.delta < 0:
            raise AggregationError("slack-voltage half-range must be >= 0")
        if self.p_min_transfo_kw > self.p_max_transfo_kw:
            raise AggregationError("transformer limits must be ordered")
        names = [tuple(s.name for s in f.services) for f in self.feeders]
        if len(set(names)) > 1:
            raise AggregationError("all feeders must offer the same service list")


def gcp_baseload_range(result: AggregationResult) -> tuple[np.ndarray, np.ndarray]:
    """Extreme GCP baseload power per time step over the uncertainty set."""
    problem = result.problem
    T = problem.index.T
    base = result.baseload
    if base.mode == "controlled":
        return base.p0b.copy(), base.p0b.copy()
    if base.mode == "self_dispatch":
        return base.e0 - base.E0, base.e0 + base.E0
    b0, Mb = problem.reduced.b0, problem.reduced.Mb
    lo = b0.copy()
    hi = b0.copy()
    if problem.uset is not None and problem.index.n_zeta:
        for t in range(T):
            hi[t] += problem.uset.support(Mb[t])
            lo[t] -= problem.uset.support(-Mb[t])
    return lo, hi


def solve_feeders(bundle: FeederBundle, *, jobs: int = 1,
                  **solve_kw) -> list[AggregationResult]:
    """Solve every feeder with duplicated network rows at ``1 +- delta``.

    Feeders are independent; with ``jobs > 1`` they are solved concurrently.
    An infeasible feeder aborts the bundle with its name in the error.
    """

    def run(case: FeederCase) -> AggregationResult:
        try:
            return case.solve(delta=bundle.delta, **solve_kw)
        except InfeasibleError as exc:
            raise InfeasibleError(f"feeder {case.name!r}: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run, bundle.feeders))
    return [run(case) for case in bundle.feeders]


@dataclass(frozen=True)
class CombinedResult:
    """Substation-level capacities and the per-feeder share policies."""

    E: dict[str, np.ndarray]            # per service, (T,), kW
    shares: dict[str, np.ndarray]       # per service, (n_feeders, T), kW
    feeder_results: tuple[AggregationResult, ...]
    feeder_names: tuple[str, ...]
    baseload_lo: np.ndarray             # summed feeder baseload range
    baseload_hi: np.ndarray
    objective: float

    def feeder_activation(self, service: str, feeder: int,
                          xi: np.ndarray) -> np.ndarray:
        """Map a substation activation into feeder ``feeder``'s own ball."""
        E_f = self.feeder_results[feeder].services[service].E
        share = self.shares[service][feeder]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(E_f > 0, share / np.where(E_f > 0, E_f, 1.0), 0.0)
        return ratio * np.asarray(xi, float)


def combine_feeders(
    feeder_results: list[AggregationResult],
    bundle: FeederBundle,
    *,
    feas_tol: float = 1e-9,
) -> CombinedResult:
    """Solve the substation combination problem over the feeder ellipsoids.

    Maximizes the price-weighted substation capacities subject to nonnegative
    per-feeder shares bounded by the feeder capacities and to the transformer
    rating reduced by the total baseload range.
    """
    if len(feeder_results) != len(bundle.feeders):
        raise AggregationError("one result per feeder required")
    ref = feeder_results[0]
    service_names = list(ref.services)
    T = ref.problem.index.T
    n_f = len(feeder_results)

    lo_total = np.zeros(T)
    hi_total = np.zeros(T)
    for res in feeder_results:
        lo, hi = gcp_baseload_range(res)
        lo_total += lo
        hi_total += hi
    head_up = bundle.p_max_transfo_kw - hi_total      # room for extra export
    head_dn = lo_total - bundle.p_min_transfo_kw      # room for extra import
    if np.any(head_up < -1e-9) or np.any(head_dn < -1e-9):
        raise InfeasibleError(
            "baseload range alone exceeds the transformer rating"
        )

    prog = ConicProgram("multifeeder")
    E_h = {}
    share_h = {}
    for name in service_names:
        E_h[name] = prog.add_variable(f"E[{name}]", T)
        share_h[name] = prog.add_variable(f"share[{name}]", n_f * T)
    prog.set_objective(
        {E_h[name]: ref.services[name].spec.prices for name in service_names},
        "max",
    )
    for name in service_names:
        spec = ref.services[name].spec
        e, a = E_h[name], share_h[name]
        idx = np.arange(n_f * T)
        # shares compose the substation capacity and stay nonnegative
        prog.add_linear(
            {a: (np.tile(np.arange(T), n_f),
                 np.concatenate([f * T + np.arange(T) for f in range(n_f)]),
                 np.ones(n_f * T)),
             e: -np.eye(T)},
            np.zeros(T), "==", [f"share_sum[{name}][{t}]" for t in range(T)],
        )
        prog.add_linear({a: (idx, idx, -np.ones(n_f * T))}, np.zeros(n_f * T),
                        "<=", [f"share_pos[{name}][{f},{t}]"
                               for f in range(n_f) for t in range(T)])
        caps = np.concatenate([feeder_results[f].services[name].E
                               for f in range(n_f)])
        prog.add_linear({a: (idx, idx, np.ones(n_f * T))}, caps, "<=",
                        [f"containment[{name}][{f},{t}]"
                         for f in range(n_f) for t in range(T)])
        # zero-capacity steps contribute no share
        zero = np.where(caps <= 1e-12)[0]
        if zero.size:
            prog.add_linear({a: (np.arange(zero.size), zero, np.ones(zero.size))},
                            np.zeros(zero.size), "==",
                            [f"share_zero[{name}][{int(k)}]" for k in zero])
        if spec.block_steps > 1:
            for start in range(0, T, spec.block_steps):
                for t in range(start + 1, start + spec.block_steps):
                    prog.add_linear({e: _pair_row(T, start, t)}, 0.0, "==",
                                    f"E_block[{name}][{t}]")
    # transformer rows: simultaneous worst case of independent activations
    up_terms = {E_h[name]: np.eye(T) for name in service_names
                if ref.services[name].spec.kind in ("symmetric", "up")}
    if up_terms and np.all(np.isfinite(head_up)):
        prog.add_linear(up_terms, head_up, "<=",
                        [f"transfo_up[{t}]" for t in range(T)])
    dn_terms = {E_h[name]: np.eye(T) for name in service_names
                if ref.services[name].spec.kind in ("symmetric", "down")}
    if dn_terms and np.all(np.isfinite(head_dn)):
        prog.add_linear(dn_terms, head_dn, "<=",
                        [f"transfo_dn[{t}]" for t in range(T)])

    sol = prog.solve(feas_tol=feas_tol)
    if sol.status == "infeasible":
        raise InfeasibleError("multifeeder combination infeasible")
    if sol.status not in ("optimal",):
        raise RuntimeError(f"combination solve ended with status {sol.status}")
    # clip solver noise into the feeder capacities so that the containment
    # ratios stay inside the unit ball, then recompose the capacities
    E = {}
    shares = {}
    for name in service_names:
        caps = np.vstack([feeder_results[f].services[name].E
                          for f in range(n_f)])
        raw = sol.value(f"share[{name}]").reshape(n_f, T)
        clipped = np.clip(raw, 0.0, caps)
        clipped[caps <= 1e-9 * max(1.0, caps.max())] = 0.0
        shares[name] = clipped
        E[name] = clipped.sum(axis=0)
    return CombinedResult(
        E=E, shares=shares, feeder_results=tuple(feeder_results),
        feeder_names=tuple(c.name for c in bundle.feeders),
        baseload_lo=lo_total, baseload_hi=hi_total,
        objective=float(sol.objective),
    )


def _pair_row(T: int, a: int, b: int) -> tuple:
    return (np.zeros(2, np.int64), np.array([a, b]), np.array([1.0, -1.0]))


def disaggregate_chain(
    combined: CombinedResult,
    activations: dict[str, np.ndarray],
    zetas: list[np.ndarray] | None = None,
    *,
    tol: float = 1e-8,
):
    """Disaggregate substation activations feeder by feeder, then DER by DER.

    Returns one :class:`~flexcap.aggregator.Disaggregation` per feeder.
    Raises when a feeder-level activation leaves its unit ball beyond ``tol``
    (an invariant breach of the combination problem).
    """
    n_f = len(combined.feeder_results)
    zetas = zetas if zetas is not None else [None] * n_f
    out = []
    for f, res in enumerate(combined.feeder_results):
        feeder_acts = {}
        for name, xi in activations.items():
            res.services[name].spec.admissible(np.asarray(xi, float))
            xi_f = combined.feeder_activation(name, f, xi)
            if np.linalg.norm(xi_f) > 1.0 + tol:
                raise AggregationError(
                    f"feeder {combined.feeder_names[f]!r} activation outside "
                    f"its unit ball for service {name!r}"
                )
            feeder_acts[name] = xi_f
        out.append(disaggregate(res, feeder_acts, zetas[f]))
    return out
