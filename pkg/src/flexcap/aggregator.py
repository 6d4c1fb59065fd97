"""Robust multi-service flexibility aggregation at the grid connection point.

Assembles and solves the conic program that sizes one diagonal flexibility
ellipsoid per ancillary service together with affine disaggregation policies,
such that any admissible combination of service activations and any
uncertainty realization inside the chosen set keeps every network and resource
constraint satisfied.  The equality between controllable injections and the
GCP power is eliminated through the orthogonal basis split ``u = B1 x + B2 y``
of the export map, after which every constraint row is made robust against

* each service's activation on its (quadrant-restricted) unit ball, via one
  second-order cone per row and service,
* the uncertainty driver on its ellipsoid (support-function cones) or
  hyperbox (exact per-component vertex selection),
* the baseload operating mode (uncontrolled pass-through, controlled expected
  schedule, or self-dispatch inside a given ellipsoid).

The objective is the price-weighted sum of offered capacities; explicit rows
enforce cost-effectiveness of every possible activation and a common sign for
all controllable injections per service.

The workspace is kW: grid sensitivities are rescaled from per-unit on entry
and offered capacities are reported in kW.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, ConicSolution, VarHandle
from .netmodel import BasisDecomposition, LinearGridModel, NetworkDescription
from .resources import (
    ROW_STATE,
    LinearConstraintBlock,
    concat_blocks,
)

SERVICE_KINDS = ("symmetric", "up", "down")


class AggregationError(ValueError):
    """Inconsistent aggregation inputs."""


class ActivationError(ValueError):
    """Activation vector outside its admissible (quadrant) set."""


@dataclass(frozen=True)
class ServiceSpec:
    """One ancillary-service product offered over the horizon.

    ``prices`` (and ``benefits``, defaulting to the prices) are per kW and
    time step; ``costs`` is the per-kW operating cost of each injection
    coordinate when allocated to this service, laid out like the stacked
    injection vector.  ``block_steps`` forces the offered capacity constant
    within consecutive blocks.  ``eligible`` names the DERs allowed to
    contribute (``None`` means all).  ``energy_coupling`` scales the
    state-of-energy impact of the committed power (frequency containment
    biases stored energy only by its empirical activation ratio).
    """

    name: str
    kind: str
    prices: np.ndarray
    benefits: np.ndarray | None = None
    block_steps: int = 1
    eligible: tuple[str, ...] | None = None
    costs: np.ndarray | None = None
    energy_coupling: float = 1.0

    def __post_init__(self):
        if self.kind not in SERVICE_KINDS:
            raise AggregationError(f"unknown service kind {self.kind!r}")
        prices = np.asarray(self.prices, float)
        if np.any(prices < 0):
            raise AggregationError("service prices must be nonnegative")
        if self.block_steps < 1 or len(prices) % self.block_steps:
            raise AggregationError("block length must divide the horizon")
        if self.costs is not None and np.any(np.asarray(self.costs) < -1e-12):
            raise AggregationError("service cost vectors must be nonnegative")
        object.__setattr__(self, "prices", prices)
        if self.benefits is not None:
            object.__setattr__(self, "benefits", np.asarray(self.benefits, float))

    @property
    def T(self) -> int:
        return len(self.prices)

    @property
    def benefit(self) -> np.ndarray:
        return self.prices if self.benefits is None else self.benefits

    def admissible(self, xi: np.ndarray, tol: float = 1e-9) -> None:
        xi = np.asarray(xi, float)
        if xi.shape != (self.T,):
            raise ActivationError(f"activation must have shape ({self.T},)")
        if np.linalg.norm(xi) > 1.0 + tol:
            raise ActivationError("activation outside the unit ball")
        if self.kind == "up" and np.any(xi < -tol):
            raise ActivationError("up service requires a nonnegative activation")
        if self.kind == "down" and np.any(xi > tol):
            raise ActivationError("down service requires a nonpositive activation")


@dataclass(frozen=True)
class BaseloadMode:
    """Baseload handling at the GCP: one of ``uncontrolled`` (prosumption
    passes through), ``controlled`` (expected schedule ``p0`` is optimized,
    injections track it) or ``self_dispatch`` (GCP baseload confined to a
    given ellipsoid; the policy absorbs the prosumption uncertainty)."""

    mode: str
    energy_prices: np.ndarray | None = None   # controlled: c0_t
    der_costs: np.ndarray | None = None       # controlled: per-coordinate cost
    E0: np.ndarray | None = None               # self-dispatch: diagonal, kW
    e0: np.ndarray | None = None               # self-dispatch: center, kW

    @classmethod
    def uncontrolled(cls) -> "BaseloadMode":
        return cls("uncontrolled")

    @classmethod
    def controlled(cls, energy_prices, der_costs=None) -> "BaseloadMode":
        if energy_prices is None:
            raise AggregationError("controlled baseload requires an energy cost series")
        return cls(
            "controlled",
            energy_prices=np.asarray(energy_prices, float),
            der_costs=None if der_costs is None else np.asarray(der_costs, float),
        )

    @classmethod
    def self_dispatch(cls, E0, e0) -> "BaseloadMode":
        E0 = np.asarray(E0, float)
        e0 = np.asarray(e0, float)
        if np.any(E0 < 0):
            raise AggregationError("self-dispatch ellipsoid must be positive semidefinite")
        return cls("self_dispatch", E0=E0, e0=e0)


@dataclass(frozen=True)
class ReducedConstraintSystem:
    """Stacked inequality system after the basis reduction.

    ``W1 = W B1``, ``W2 = W B2`` and ``W1D = W1 D^-1`` are precomputed once;
    per-service copies scale the state rows by the service's energy coupling.
    ``theta`` is the affine dependence of each row on the uncertainty driver
    (right-hand side maps plus the routing of the slack offset through the
    baseload policy) and ``nu`` the constant master-row offsets.
    """

    system: LinearConstraintBlock
    basis: BasisDecomposition
    W1: np.ndarray
    W2: np.ndarray
    W1D: np.ndarray
    state_mask: np.ndarray
    theta: np.ndarray
    nu: np.ndarray
    b0: np.ndarray
    Mb: np.ndarray

    @property
    def m(self) -> int:
        return self.system.n_rows

    def scaled_maps(self, energy_coupling: float) -> tuple[np.ndarray, np.ndarray]:
        if energy_coupling == 1.0:
            return self.W1D, self.W2
        w1d = self.W1D.copy()
        w2 = self.W2.copy()
        w1d[self.state_mask] *= energy_coupling
        w2[self.state_mask] *= energy_coupling
        return w1d, w2


@dataclass(frozen=True)
class ProblemIndex:
    T: int
    n_c: int
    n_y: int
    n_zeta: int
    m: int
    handles: dict[str, VarHandle]
    service_names: tuple[str, ...]
    der_slots: dict[str, int]


@dataclass(frozen=True)
class AggregationProblem:
    program: ConicProgram
    index: ProblemIndex
    reduced: ReducedConstraintSystem
    services: tuple[ServiceSpec, ...]
    baseload: BaseloadMode
    uset: object | None
    grid: LinearGridModel
    dt_hours: float


# ---------------------------------------------------------------------------
# Network rows
# ---------------------------------------------------------------------------


def network_block(
    net: NetworkDescription,
    grid: LinearGridModel,
    *,
    label_suffix: str = "",
) -> LinearConstraintBlock:
    """Voltage and current-magnitude limit rows of the surrogate, in the kW
    workspace (sensitivities scaled by the power base)."""
    T, n_c = grid.T, grid.n_c
    n_cols = 2 * n_c * T
    scale = 1.0 / grid.s_base_kva
    n_bus, n_br = net.n_bus, net.n_branch
    rows_per_t = 2 * n_bus + 2 * n_br
    W = np.zeros((rows_per_t * T, n_cols))
    z0 = np.zeros(rows_per_t * T)
    Mz = np.zeros((rows_per_t * T, grid.n_zeta))
    labels: list[str] = []
    kinds: list[str] = []
    v_min, v_max, i_max = net.v_min, net.v_max, net.i_max
    for t in range(T):
        p_cols = np.arange(t * n_c, (t + 1) * n_c)
        q_cols = n_c * T + p_cols
        cols = np.concatenate([p_cols, q_cols])
        kv = grid.Kv_t[t] * scale
        ki = grid.Ki_t[t] * scale
        r0 = rows_per_t * t
        W[r0:r0 + n_bus][:, cols] = kv
        z0[r0:r0 + n_bus] = v_max - grid.w0[t]
        Mz[r0:r0 + n_bus] = -grid.Mw[t]
        W[r0 + n_bus:r0 + 2 * n_bus][:, cols] = -kv
        z0[r0 + n_bus:r0 + 2 * n_bus] = grid.w0[t] - v_min
        Mz[r0 + n_bus:r0 + 2 * n_bus] = grid.Mw[t]
        # the linear magnitude surrogate goes negative under flow reversal, so
        # the ampacity bounds it on both sides instead of pinning it at zero
        r1 = r0 + 2 * n_bus
        W[r1:r1 + n_br][:, cols] = ki
        z0[r1:r1 + n_br] = i_max - grid.d0[t]
        Mz[r1:r1 + n_br] = -grid.Md[t]
        W[r1 + n_br:r1 + 2 * n_br][:, cols] = -ki
        z0[r1 + n_br:r1 + 2 * n_br] = grid.d0[t] + i_max
        Mz[r1 + n_br:r1 + 2 * n_br] = grid.Md[t]
        labels += [f"v_max[{b.bus_id}]@{t}{label_suffix}" for b in net.buses]
        labels += [f"v_min[{b.bus_id}]@{t}{label_suffix}" for b in net.buses]
        labels += [f"i_max[{br.branch_id}]@{t}{label_suffix}" for br in net.branches]
        labels += [f"i_rev[{br.branch_id}]@{t}{label_suffix}" for br in net.branches]
        kinds += ["voltage"] * (2 * n_bus) + ["current"] * (2 * n_br)
    return LinearConstraintBlock(W, z0, Mz, tuple(labels), tuple(kinds))


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------


def _kron_pattern(n_outer: int, n_inner: int) -> tuple[np.ndarray, np.ndarray]:
    """COO pattern of a block-diagonal map from a column-major flattened
    matrix variable: row ``tau`` touches the ``tau``-th column block."""
    rows = np.repeat(np.arange(n_outer), n_inner)
    cols = np.arange(n_outer * n_inner)
    return rows, cols


def build_problem(
    grid: LinearGridModel,
    basis: BasisDecomposition,
    blocks: list[LinearConstraintBlock],
    services: list[ServiceSpec],
    baseload: BaseloadMode,
    uset=None,
    *,
    dt_hours: float = 1.0,
    der_slots: dict[str, int] | None = None,
    name: str = "aggregation",
) -> AggregationProblem:
    """Assemble the robust aggregation program.

    ``blocks`` must already live in the fleet-wide injection space (resource
    blocks embedded, network rows from :func:`network_block`).  ``der_slots``
    maps DER labels to controllable slots and is required when any service
    restricts eligibility.
    """
    T, n_c = grid.T, grid.n_c
    n_cols = 2 * n_c * T
    services = tuple(services)
    if not services and baseload.mode == "uncontrolled":
        raise AggregationError("need at least one service or a baseload decision")
    for svc in services:
        if svc.T != T:
            raise AggregationError(f"service {svc.name!r} horizon mismatch")
    system = concat_blocks(blocks)
    if system.n_cols != n_cols:
        raise AggregationError(
            f"blocks have {system.n_cols} columns, expected {n_cols}"
        )
    n_zeta = system.Mz.shape[1]
    if grid.n_zeta not in (0, n_zeta):
        raise AggregationError("grid and block uncertainty dimensions differ")
    uncertain_maps = bool(
        (n_zeta and np.any(system.Mz)) or (grid.n_zeta and np.any(grid.Mb))
    )
    if uset is None and uncertain_maps:
        raise AggregationError(
            "uncertain maps present but no uncertainty set was given"
        )
    if uset is not None and uset.dimension != n_zeta:
        raise AggregationError(
            f"uncertainty set dimension {uset.dimension} != driver dimension {n_zeta}"
        )

    if basis.B1.shape[0] != n_cols or basis.D.shape != (T, T):
        raise AggregationError("basis decomposition does not match the grid model")
    n_y = basis.n_y
    D_inv = basis.D_inv

    s_base = grid.s_base_kva
    b0 = grid.b0 * s_base
    Mb = (grid.Mb * s_base) if grid.n_zeta else np.zeros((T, n_zeta))

    W1 = system.W @ basis.B1
    W2 = system.W @ basis.B2
    W1D = W1 @ D_inv
    m = system.n_rows
    state_mask = np.array([k == ROW_STATE for k in system.kinds])

    mode = baseload.mode
    routed = mode in ("controlled", "self_dispatch")
    theta = system.Mz + (W1D @ Mb if routed else 0.0)
    if mode == "self_dispatch":
        nu = system.z0 + W1D @ (b0 - baseload.e0)
    elif mode == "controlled":
        nu = system.z0 + W1D @ b0
    else:
        nu = system.z0.copy()
    reduced = ReducedConstraintSystem(
        system, basis, W1, W2, W1D, state_mask, theta, nu, b0, Mb
    )

    if system.pin_baseload and mode != "self_dispatch":
        raise AggregationError(
            "non-curtailable PV requires the self-dispatch baseload mode "
            "(or model the plant as uncontrollable prosumption)"
        )

    prog = ConicProgram(name)
    handles: dict[str, VarHandle] = {}

    def var(vname: str, dim: int) -> VarHandle:
        handles[vname] = prog.add_variable(vname, dim)
        return handles[vname]

    for svc in services:
        var(f"E[{svc.name}]", T)
        var(f"K[{svc.name}]", n_y * T)
        var(f"alpha[{svc.name}]", m)
        if svc.kind in ("up", "down"):
            var(f"eps[{svc.name}]", m * T)
    has_lambda = uset is not None
    if has_lambda:
        var("lambda", m)
    var("alpha", m)
    if mode == "controlled":
        var("p0b", T)
        var("gamma0", n_y)
        var("beta", m)
        if baseload.energy_prices is not None:
            var("pb_pos", n_c * T)
            var("pb_neg", n_c * T)
    elif mode == "self_dispatch":
        var("K0", n_y * T)
        var("gamma0", n_y)
        if has_lambda:
            var("L0", n_y * n_zeta)
        var("beta", m)

    prog.set_objective(
        {handles[f"E[{svc.name}]"]: svc.prices for svc in services}, "max"
    )

    rows_T, cols_T = _kron_pattern(T, n_y)       # cone rows over K columns
    policy_rows = np.repeat(np.arange(n_cols * T), n_y)
    policy_cols = np.tile(np.arange(n_y * T), n_cols)
    B1D = basis.B1 @ D_inv

    # -- per-service structure ------------------------------------------------
    for svc in services:
        E = handles[f"E[{svc.name}]"]
        K = handles[f"K[{svc.name}]"]
        alpha_s = handles[f"alpha[{svc.name}]"]
        w1d_s, w2_s = reduced.scaled_maps(svc.energy_coupling)

        prog.add_linear({E: -np.eye(T)}, np.zeros(T), "<=",
                        [f"E_pos[{svc.name}][{t}]" for t in range(T)])
        if svc.block_steps > 1:
            rows, cols, vals, rhs, labels = [], [], [], [], []
            r = 0
            for start in range(0, T, svc.block_steps):
                for t in range(start + 1, start + svc.block_steps):
                    rows += [r, r]
                    cols += [start, t]
                    vals += [1.0, -1.0]
                    rhs.append(0.0)
                    labels.append(f"E_block[{svc.name}][{t}]")
                    r += 1
            if rhs:
                prog.add_linear({E: (np.array(rows), np.array(cols), np.array(vals))},
                                np.array(rhs), "==", labels)

        if svc.kind == "symmetric":
            # lift the per-row response vectors into their own variables so
            # every cone stays local (keeps the KKT factorization sparse)
            z = prog.add_variable(f"resp[{svc.name}]", m * T)
            handles[f"resp[{svc.name}]"] = z
            mt = m * T
            er = np.arange(mt)
            prog.add_linear(
                {E: (er, np.tile(np.arange(T), m), w1d_s.ravel()),
                 K: (np.repeat(er, n_y), np.tile(np.arange(n_y * T), m),
                     np.repeat(w2_s, T, axis=0).ravel()),
                 z: (er, er, -np.ones(mt))},
                np.zeros(mt), "==",
                [f"resp[{svc.name}][{i},{t}]" for i in range(m) for t in range(T)],
            )
            for i in range(m):
                prog.add_soc(
                    {z: (np.arange(T), i * T + np.arange(T), np.ones(T))},
                    np.zeros(T),
                    {alpha_s: (np.array([i]), np.array([1.0]))},
                    0.0,
                    f"svc[{svc.name}]:{system.labels[i]}",
                )
        else:
            sign = 1.0 if svc.kind == "up" else -1.0
            eps = handles[f"eps[{svc.name}]"]
            mt = m * T
            # eps_{i,t} >= sign * (w1D E + w2 K)_{i,t}
            er = np.arange(mt)
            e_cols = np.tile(np.arange(T), m)
            k_rows = np.repeat(er, n_y)
            k_cols = np.tile(np.arange(n_y * T), m)
            k_vals = sign * np.repeat(w2_s, T, axis=0).ravel()
            prog.add_linear(
                {E: (er, e_cols, sign * w1d_s.ravel()),
                 K: (k_rows, k_cols, k_vals),
                 eps: (er, er, -np.ones(mt))},
                np.zeros(mt), "<=",
                [f"eps_dom[{svc.name}][{i},{t}]" for i in range(m) for t in range(T)],
            )
            prog.add_linear({eps: (er, er, -np.ones(mt))}, np.zeros(mt), "<=",
                            [f"eps_pos[{svc.name}][{i},{t}]"
                             for i in range(m) for t in range(T)])
            for i in range(m):
                prog.add_soc(
                    {eps: (np.arange(T), i * T + np.arange(T), np.ones(T))},
                    np.zeros(T),
                    {alpha_s: (np.array([i]), np.array([1.0]))},
                    0.0,
                    f"svc[{svc.name}]:{system.labels[i]}",
                )

        # positivity: every policy entry nonnegative (common injection sign)
        prog.add_linear(
            {E: (np.arange(n_cols * T), np.tile(np.arange(T), n_cols),
                 -B1D.ravel()),
             K: (policy_rows, policy_cols, -np.repeat(basis.B2, T, axis=0).ravel())},
            np.zeros(n_cols * T), "<=",
            [f"positivity[{svc.name}][{j},{t}]"
             for j in range(n_cols) for t in range(T)],
        )

        # cost-effectiveness: benefits dominate allocated costs per component
        if svc.costs is not None:
            c = np.asarray(svc.costs, float)
            if c.shape != (n_cols,):
                raise AggregationError(
                    f"service {svc.name!r} cost vector must have {n_cols} entries"
                )
            cBD = c @ B1D
            cB2 = c @ basis.B2
            prog.add_linear(
                {E: np.diag(cBD - svc.benefit),
                 K: (np.repeat(np.arange(T), n_y), np.arange(n_y * T),
                     np.tile(cB2, T))},
                np.zeros(T), "<=",
                [f"cost_eff[{svc.name}][{t}]" for t in range(T)],
            )

        # eligibility: excluded DERs contribute nothing to this service
        if svc.eligible is not None:
            if der_slots is None:
                raise AggregationError(
                    "eligibility restriction requires der_slots"
                )
            excluded = [d for d in der_slots if d not in svc.eligible]
            for der in excluded:
                slot = der_slots[der]
                coords = np.concatenate(
                    [[t * n_c + slot for t in range(T)],
                     [n_c * T + t * n_c + slot for t in range(T)]]
                ).astype(np.int64)
                nr = len(coords) * T
                rr = np.arange(nr)
                prog.add_linear(
                    {E: (rr, np.tile(np.arange(T), len(coords)),
                         B1D[coords].ravel()),
                     K: (np.repeat(rr, n_y), np.tile(np.arange(n_y * T), len(coords)),
                         np.repeat(basis.B2[coords], T, axis=0).ravel())},
                    np.zeros(nr), "==",
                    [f"eligibility[{svc.name}][{der}][{j},{t}]"
                     for j in coords for t in range(T)],
                )

    # -- uncertainty ----------------------------------------------------------
    if has_lambda:
        lam = handles["lambda"]
        if mode == "self_dispatch":
            _uncertain_rows_with_policy(
                prog, handles, reduced, uset, m, n_y, n_zeta
            )
        else:
            r_const = -theta  # (m, n_zeta)
            if uset.kind == "ellipsoid":
                for i in range(m):
                    prog.add_soc(
                        {}, uset.shape.T @ r_const[i],
                        {lam: (np.array([i]), np.array([1.0]))},
                        -float(r_const[i] @ uset.center),
                        f"unc:{system.labels[i]}",
                    )
            else:
                support = np.array([uset.support(r_const[i]) for i in range(m)])
                prog.add_linear(
                    {lam: (np.arange(m), np.arange(m), -np.ones(m))},
                    -support, "<=",
                    [f"unc:{system.labels[i]}" for i in range(m)],
                )

    # -- aggregation and master rows -------------------------------------------
    agg_terms: dict = {handles["alpha"]: (np.arange(m), np.arange(m), -np.ones(m))}
    for svc in services:
        agg_terms[handles[f"alpha[{svc.name}]"]] = (
            np.arange(m), np.arange(m), np.ones(m)
        )
    if has_lambda:
        agg_terms[handles["lambda"]] = (np.arange(m), np.arange(m), np.ones(m))
    prog.add_linear(agg_terms, np.zeros(m), "<=",
                    [f"aggregate:{lbl}" for lbl in system.labels])

    master: dict = {handles["alpha"]: (np.arange(m), np.arange(m), np.ones(m))}
    if mode != "uncontrolled":
        master[handles["beta"]] = (np.arange(m), np.arange(m), np.ones(m))
    if mode == "self_dispatch":
        master[handles["gamma0"]] = W2
    prog.add_linear(master, nu, "<=", [f"master:{lbl}" for lbl in system.labels])

    # -- baseload rows ----------------------------------------------------------
    if mode == "controlled":
        _controlled_baseload_rows(prog, handles, reduced, baseload, grid, n_c)
    elif mode == "self_dispatch":
        _self_dispatch_rows(prog, handles, reduced, baseload, m, n_y, T)

    if system.pin_baseload:
        _pin_baseload_rows(prog, handles, reduced, baseload, system, grid, has_lambda)

    prog.freeze()
    index = ProblemIndex(
        T=T, n_c=n_c, n_y=n_y, n_zeta=n_zeta, m=m, handles=handles,
        service_names=tuple(s.name for s in services),
        der_slots=dict(der_slots or {}),
    )
    return AggregationProblem(
        prog, index, reduced, services, baseload, uset, grid, dt_hours
    )


def _uncertain_rows_with_policy(prog, handles, reduced, uset, m, n_y, n_zeta):
    """Self-dispatch: the uncertainty response ``L0`` is a decision, so each
    row's driver coefficient ``r_i = L0' w2_i - theta_i`` becomes an
    intermediate variable before the support-function reformulation."""
    lam = handles["lambda"]
    L0 = handles["L0"]
    r = prog.add_variable("r_unc", m * n_zeta)
    handles["r_unc"] = r
    rows = np.repeat(np.arange(m * n_zeta), n_y)
    cols = np.tile(np.arange(n_y * n_zeta), m)
    vals = -np.repeat(reduced.W2, n_zeta, axis=0).ravel()
    prog.add_linear(
        {r: (np.arange(m * n_zeta), np.arange(m * n_zeta), np.ones(m * n_zeta)),
         L0: (rows, cols, vals)},
        -reduced.theta.ravel(), "==",
        [f"r_unc[{i},{k}]" for i in range(m) for k in range(n_zeta)],
    )
    if uset.kind == "ellipsoid":
        St = uset.shape.T
        sr, sc = np.nonzero(St)
        for i in range(m):
            prog.add_soc(
                {r: (sr, i * n_zeta + sc, St[sr, sc])},
                np.zeros(n_zeta),
                {lam: (np.array([i]), np.array([1.0])),
                 r: (i * n_zeta + np.arange(n_zeta), -uset.center)},
                0.0,
                f"unc:{reduced.system.labels[i]}",
            )
    else:
        half = 0.5 * (uset.upper - uset.lower)
        mid = 0.5 * (uset.upper + uset.lower)
        t = prog.add_variable("t_unc", m * n_zeta)
        handles["t_unc"] = t
        mk = m * n_zeta
        idx = np.arange(mk)
        half_rep = np.tile(half, m)
        for sgn in (1.0, -1.0):
            prog.add_linear(
                {r: (idx, idx, sgn * half_rep), t: (idx, idx, -np.ones(mk))},
                np.zeros(mk), "<=",
                [f"t_unc{'+' if sgn > 0 else '-'}[{i},{k}]"
                 for i in range(m) for k in range(n_zeta)],
            )
        rows = np.repeat(np.arange(m), n_zeta)
        prog.add_linear(
            {r: (rows, idx, np.tile(mid, m)),
             t: (rows, idx, np.ones(mk)),
             lam: (np.arange(m), np.arange(m), -np.ones(m))},
            np.zeros(m), "<=",
            [f"unc:{lbl}" for lbl in reduced.system.labels],
        )


def _controlled_baseload_rows(prog, handles, reduced, baseload, grid, n_c):
    """Deterministic baseload contribution, energy-neutrality of the schedule
    and cost recovery of the shift with the absolute injections split into
    nonnegative parts."""
    m = reduced.m
    T = grid.T
    p0b, gamma0, beta = handles["p0b"], handles["gamma0"], handles["beta"]
    prog.add_linear(
        {p0b: reduced.W1D, gamma0: reduced.W2,
         beta: (np.arange(m), np.arange(m), -np.ones(m))},
        np.zeros(m), "<=", [f"baseload:{lbl}" for lbl in reduced.system.labels],
    )
    prog.add_linear({p0b: np.ones(T)}, float(reduced.b0.sum()), "==",
                    "baseload_energy_balance")
    if baseload.energy_prices is None:
        return
    c0 = np.asarray(baseload.energy_prices, float)
    if c0.shape != (T,):
        raise AggregationError("energy cost series must have length T")
    B1D = reduced.basis.B1 @ reduced.basis.D_inv
    act = np.arange(n_c * T)  # active-power coordinates
    pp, pm = handles["pb_pos"], handles["pb_neg"]
    n_act = len(act)
    eye = (np.arange(n_act), np.arange(n_act), np.ones(n_act))
    neg_eye = (np.arange(n_act), np.arange(n_act), -np.ones(n_act))
    prog.add_linear(
        {p0b: B1D[act], gamma0: reduced.basis.B2[act], pp: neg_eye, pm: eye},
        B1D[act] @ reduced.b0, "==",
        [f"pb_split[{j}]" for j in act],
    )
    for h, tag in ((pp, "pb_pos"), (pm, "pb_neg")):
        prog.add_linear({h: neg_eye}, np.zeros(n_act), "<=",
                        [f"{tag}[{j}]" for j in act])
    costs = baseload.der_costs
    cr = np.zeros(n_act) if costs is None else np.asarray(costs, float)[act]
    prog.add_linear({p0b: -c0, pp: cr, pm: cr}, -float(c0 @ reduced.b0), "<=",
                    "baseload_cost_recovery")


def _self_dispatch_rows(prog, handles, reduced, baseload, m, n_y, T):
    """Worst case of the given baseload ellipsoid on every row, with the
    response vectors lifted like the service cones."""
    K0, beta = handles["K0"], handles["beta"]
    offsets = reduced.W1D * baseload.E0[None, :]
    z = prog.add_variable("resp[baseload]", m * T)
    handles["resp[baseload]"] = z
    mt = m * T
    er = np.arange(mt)
    prog.add_linear(
        {K0: (np.repeat(er, n_y), np.tile(np.arange(n_y * T), m),
              np.repeat(reduced.W2, T, axis=0).ravel()),
         z: (er, er, -np.ones(mt))},
        -offsets.ravel(), "==",
        [f"resp[baseload][{i},{t}]" for i in range(m) for t in range(T)],
    )
    for i in range(m):
        prog.add_soc(
            {z: (np.arange(T), i * T + np.arange(T), np.ones(T))},
            np.zeros(T),
            {beta: (np.array([i]), np.array([1.0]))},
            0.0,
            f"baseload:{reduced.system.labels[i]}",
        )


def _pin_baseload_rows(prog, handles, reduced, baseload, system, grid, has_lambda):
    """Pin non-curtailable PV baseload components to their MPP trajectory and
    exclude them from the self-dispatch balancing response."""
    basis = reduced.basis
    B1D = basis.B1 @ basis.D_inv
    T = grid.T
    n_y = basis.n_y
    gamma0, K0 = handles["gamma0"], handles["K0"]
    for col, affine in sorted(system.pin_baseload.items()):
        off, zmap = affine[0], affine[1:]
        target = off - float(B1D[col] @ (baseload.e0 - reduced.b0))
        prog.add_linear({gamma0: basis.B2[col]}, target, "==", f"pin_det[{col}]")
        prog.add_linear(
            {K0: (np.repeat(np.arange(T), n_y), np.arange(n_y * T),
                  np.tile(basis.B2[col], T))},
            -B1D[col] * baseload.E0, "==",
            [f"pin_xi0[{col}][{t}]" for t in range(T)],
        )
        if has_lambda and "L0" in handles:
            n_zeta = len(zmap)
            # (B2 L0 - B1 D^-1 Mb)[col] must equal the plant's MPP driver map
            rhs = zmap + B1D[col] @ reduced.Mb
            prog.add_linear(
                {handles["L0"]: (np.repeat(np.arange(n_zeta), n_y),
                                 np.arange(n_y * n_zeta),
                                 np.tile(basis.B2[col], n_zeta))},
                rhs, "==",
                [f"pin_zeta[{col}][{k}]" for k in range(n_zeta)],
            )


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ServiceResult:
    spec: ServiceSpec
    E: np.ndarray              # (T,) offered capacity, kW
    K: np.ndarray              # (n_y, T) null-space policy
    policy: np.ndarray         # (2 n_c T, T) injection response to xi
    cost_slack: np.ndarray     # (T,) cost-effectiveness margin


@dataclass(frozen=True)
class BaseloadResult:
    mode: str
    p0b: np.ndarray | None = None
    gamma0: np.ndarray | None = None
    K0: np.ndarray | None = None
    L0: np.ndarray | None = None
    E0: np.ndarray | None = None
    e0: np.ndarray | None = None


@dataclass(frozen=True)
class AggregationResult:
    services: dict[str, ServiceResult]
    baseload: BaseloadResult
    objective: float
    solution: ConicSolution
    problem: AggregationProblem = field(repr=False)

    @property
    def status(self) -> str:
        return self.solution.status

    @property
    def cone_count(self) -> int:
        return self.problem.program.n_cones

    def gcp_capacity(self, name: str) -> np.ndarray:
        return self.services[name].E


def solve_aggregation(
    problem: AggregationProblem,
    *,
    feas_tol: float = 1e-8,
    accept_tol: float = 1e-6,
    verbose: bool = False,
    invariant_tol: float = 1e-5,
) -> AggregationResult:
    """Solve the assembled program and re-verify the result invariants
    (nonnegative capacities, block equality, positivity, cost slack)."""
    sol = problem.program.solve(
        feas_tol=feas_tol, accept_tol=accept_tol, verbose=verbose
    )
    if sol.status == "unbounded":
        # a dual-infeasibility certificate also covers empty primal problems
        feas = problem.program.solve(feas_tol=feas_tol, accept_tol=accept_tol,
                                     zero_objective=True)
        if feas.status == "infeasible":
            sol = feas
        else:
            raise UnboundedError(
                "aggregation problem is unbounded; a resource or network "
                "bound is missing"
            )
    if sol.status == "infeasible":
        raise InfeasibleError(_infeasible_message(problem))
    idx = problem.index
    basis = problem.reduced.basis
    B1D = basis.B1 @ basis.D_inv
    services: dict[str, ServiceResult] = {}
    for svc in problem.services:
        E = sol.value(f"E[{svc.name}]").copy()
        K = sol.value(f"K[{svc.name}]").reshape(idx.T, idx.n_y).T.copy()
        policy = B1D * E[None, :] + basis.B2 @ K
        slack = _cost_slack(svc, E, policy)
        _check_service(svc, E, policy, invariant_tol)
        services[svc.name] = ServiceResult(svc, E, K, policy, slack)
    mode = problem.baseload.mode
    if mode == "controlled":
        base = BaseloadResult(
            mode, p0b=sol.value("p0b").copy(), gamma0=sol.value("gamma0").copy()
        )
    elif mode == "self_dispatch":
        L0 = None
        if "L0" in idx.handles:
            L0 = sol.value("L0").reshape(idx.n_zeta, idx.n_y).T.copy()
        base = BaseloadResult(
            mode,
            gamma0=sol.value("gamma0").copy(),
            K0=sol.value("K0").reshape(idx.T, idx.n_y).T.copy(),
            L0=L0,
            E0=problem.baseload.E0,
            e0=problem.baseload.e0,
        )
    else:
        base = BaseloadResult(mode)
    objective = sol.objective if sol.objective is not None else float("nan")
    return AggregationResult(services, base, objective, sol, problem)


class InfeasibleError(RuntimeError):
    pass


class UnboundedError(RuntimeError):
    pass


def _infeasible_message(problem: AggregationProblem) -> str:
    mode = problem.baseload.mode
    hint = (
        "self-dispatch ellipsoid may be too large for the fleet"
        if mode == "self_dispatch"
        else "resource or network limits admit no robust solution"
    )
    return f"aggregation problem infeasible ({hint})"


def _cost_slack(svc: ServiceSpec, E: np.ndarray, policy: np.ndarray) -> np.ndarray:
    if svc.costs is None:
        return svc.benefit * E
    return svc.benefit * E - np.asarray(svc.costs, float) @ policy


def _check_service(svc, E, policy, tol):
    if np.min(E) < -tol:
        raise RuntimeError(f"service {svc.name!r}: negative offered capacity")
    if svc.block_steps > 1:
        blocks = E.reshape(-1, svc.block_steps)
        if np.max(np.abs(blocks - blocks[:, :1])) > tol * max(1.0, np.max(np.abs(E))):
            raise RuntimeError(f"service {svc.name!r}: block equality violated")
    if np.min(policy) < -tol * max(1.0, np.max(np.abs(policy))):
        raise RuntimeError(f"service {svc.name!r}: policy positivity violated")


# ---------------------------------------------------------------------------
# Disaggregation and valuation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Disaggregation:
    injections: np.ndarray                 # (2 n_c T,) total controllable injections
    baseload_injections: np.ndarray
    service_injections: dict[str, np.ndarray]
    gcp_baseload: np.ndarray               # (T,)
    gcp_services: dict[str, np.ndarray]    # (T,) per service

    @property
    def gcp_total(self) -> np.ndarray:
        return self.gcp_baseload + sum(self.gcp_services.values())


def disaggregate(
    result: AggregationResult,
    activations: dict[str, np.ndarray] | None = None,
    zeta: np.ndarray | None = None,
    xi0: np.ndarray | None = None,
) -> Disaggregation:
    """Map service activations and an uncertainty realization to injections.

    Each service contributes ``policy @ xi``; the baseload contribution
    depends on the mode and absorbs the realized slack offset.  Superposition
    is exact by construction.  Activations are validated against their
    quadrant and unit-ball restrictions; membership of ``zeta`` in the
    uncertainty set is deliberately not checked here.
    """
    problem = result.problem
    idx = problem.index
    activations = activations or {}
    zeta = np.zeros(idx.n_zeta) if zeta is None else np.asarray(zeta, float)
    if zeta.shape != (idx.n_zeta,):
        raise ActivationError(f"zeta must have shape ({idx.n_zeta},)")

    service_injections: dict[str, np.ndarray] = {}
    gcp_services: dict[str, np.ndarray] = {}
    for name, res in result.services.items():
        xi = np.asarray(activations.get(name, np.zeros(idx.T)), float)
        res.spec.admissible(xi)
        service_injections[name] = res.policy @ xi
        gcp_services[name] = res.E * xi

    basis = problem.reduced.basis
    B1D = basis.B1 @ basis.D_inv
    b_zeta = problem.reduced.b0 + (problem.reduced.Mb @ zeta if idx.n_zeta else 0.0)
    base = result.baseload
    if base.mode == "controlled":
        u0 = B1D @ (base.p0b - b_zeta) + basis.B2 @ base.gamma0
        gcp_base = base.p0b.copy()
    elif base.mode == "self_dispatch":
        xi0 = np.zeros(idx.T) if xi0 is None else np.asarray(xi0, float)
        if np.linalg.norm(xi0) > 1.0 + 1e-9:
            raise ActivationError("baseload activation outside the unit ball")
        y0 = base.K0 @ xi0 + base.gamma0
        if base.L0 is not None and idx.n_zeta:
            y0 = y0 + base.L0 @ zeta
        u0 = B1D @ (base.E0 * xi0 + base.e0 - b_zeta) + basis.B2 @ y0
        gcp_base = base.E0 * xi0 + base.e0
    else:
        u0 = np.zeros(2 * idx.n_c * idx.T)
        gcp_base = b_zeta.copy()
    total = u0 + sum(service_injections.values(), np.zeros_like(u0))
    return Disaggregation(total, u0, service_injections, gcp_base, gcp_services)


def evaluate_rows(
    result: AggregationResult,
    activations: dict[str, np.ndarray] | None = None,
    zeta: np.ndarray | None = None,
    xi0: np.ndarray | None = None,
) -> np.ndarray:
    """Slack of every stacked constraint row for a realized operating point,
    with each service's state-row contribution scaled by its energy coupling
    (nonnegative slack means satisfied)."""
    problem = result.problem
    idx = problem.index
    reduced = problem.reduced
    dis = disaggregate(result, activations, zeta, xi0)
    zeta = np.zeros(idx.n_zeta) if zeta is None else np.asarray(zeta, float)
    lhs = reduced.system.W @ dis.baseload_injections
    for name, u_s in dis.service_injections.items():
        rho = result.services[name].spec.energy_coupling
        contrib = reduced.system.W @ u_s
        if rho != 1.0:
            contrib[reduced.state_mask] *= rho
        lhs += contrib
    rhs = reduced.system.z0 + (reduced.system.Mz @ zeta if idx.n_zeta else 0.0)
    return rhs - lhs


def flexibility_value(
    result: AggregationResult,
    activations: dict[str, np.ndarray],
) -> tuple[float, float, float]:
    """Realized benefit, operating cost and net value of a set of service
    activations; the net is guaranteed nonnegative by the cost-effectiveness
    rows."""
    benefit = 0.0
    cost = 0.0
    for name, xi in activations.items():
        res = result.services[name]
        res.spec.admissible(np.asarray(xi, float))
        ax = np.abs(np.asarray(xi, float))
        benefit += float(res.spec.benefit @ (res.E * ax))
        if res.spec.costs is not None:
            cost += float(np.asarray(res.spec.costs) @ (res.policy @ ax))
    return benefit, cost, benefit - cost
