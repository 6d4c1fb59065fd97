"""Distribution-network model: exact power flow and its affine surrogate.

The network is described in per-unit by a bus/branch list with a single slack
bus.  An exact Newton-Raphson power flow provides the reference solution; the
affine surrogate (slack-power map ``G``/``b``, voltage map ``K^v``/``w`` and
branch-current-magnitude map ``K^i``/``d``) is obtained by central finite
differences of the exact solution around a per-time-step operating point.
Everything in this module is in per-unit; conversion to kW happens at the
ingestion and aggregation boundaries.

Sign conventions:

* bus injections are generation-positive (loads enter as negative injections);
* ``PowerFlowSolution.slack_power`` is the complex power the slack bus injects
  into the feeder (positive when the feeder imports);
* the surrogate's grid-connection-point power ``p0 = G u + b`` is
  export-positive (power delivered to the upstream system), i.e. the negated
  real slack injection, so that additional DER generation increases ``p0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd


class NetworkFormatError(ValueError):
    """Raised when a network file cannot be parsed or fails validation."""


class PowerFlowError(RuntimeError):
    """Raised when the exact power flow does not converge."""


class RankDeficiencyError(ValueError):
    """Raised when the slack-power map has deficient row rank."""


@dataclass(frozen=True)
class Bus:
    bus_id: int
    kind: str  # "slack" | "pq"
    v_min: float
    v_max: float


@dataclass(frozen=True)
class Branch:
    branch_id: str
    from_bus: int
    to_bus: int
    z: complex       # series impedance, per-unit
    i_max: float     # ampacity, per-unit


@dataclass(frozen=True)
class NetworkDescription:
    """Validated network topology with per-unit parameters."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    base_kva: float
    base_kv: float

    def __post_init__(self):
        ids = [b.bus_id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkFormatError("duplicated bus ids")
        slacks = [b for b in self.buses if b.kind == "slack"]
        if len(slacks) != 1:
            raise NetworkFormatError(
                f"exactly one slack bus required, found {len(slacks)}"
            )
        for b in self.buses:
            if not (0.0 < b.v_min < b.v_max):
                raise NetworkFormatError(
                    f"bus {b.bus_id}: voltage bounds must satisfy 0 < v_min < v_max"
                )
        known = set(ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise NetworkFormatError(
                    f"branch {br.branch_id}: endpoint not a known bus"
                )
            if br.i_max <= 0.0:
                raise NetworkFormatError(f"branch {br.branch_id}: ampacity must be > 0")
            if br.z == 0:
                raise NetworkFormatError(f"branch {br.branch_id}: zero impedance")
        if not self._connected():
            raise NetworkFormatError("network graph is not connected")

    def _connected(self) -> bool:
        adj: dict[int, set[int]] = {b.bus_id: set() for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen = {self.buses[0].bus_id}
        stack = [self.buses[0].bus_id]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.buses)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.bus_id for b in self.buses)

    def bus_index(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise KeyError(f"unknown bus id {bus_id}") from None

    @property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses])

    @property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses])

    @property
    def i_max(self) -> np.ndarray:
        return np.array([br.i_max for br in self.branches])

    def admittance_matrix(self) -> np.ndarray:
        y = np.zeros((self.n_bus, self.n_bus), dtype=complex)
        for br in self.branches:
            f, t = self.bus_index(br.from_bus), self.bus_index(br.to_bus)
            yb = 1.0 / br.z
            y[f, f] += yb
            y[t, t] += yb
            y[f, t] -= yb
            y[t, f] -= yb
        return y

    def with_ampacity_scale(self, factor: float) -> "NetworkDescription":
        """Copy of the network with all branch ampacities scaled by ``factor``."""
        branches = tuple(
            Branch(br.branch_id, br.from_bus, br.to_bus, br.z, br.i_max * factor)
            for br in self.branches
        )
        return NetworkDescription(self.buses, branches, self.base_kva, self.base_kv)


def load_network(path: str | Path) -> NetworkDescription:
    """Load a network from a directory holding ``buses.csv``, ``branches.csv``
    and ``base.json``.

    ``buses.csv`` columns: ``id,type,vmin,vmax``; ``branches.csv`` columns:
    ``id,from,to,r_pu,x_pu,imax_pu`` (or ``r_ohm,x_ohm,imax_a``, converted
    to per-unit with the bases from ``base.json``).
    """
    root = Path(path)
    if root.is_file():
        root = root.parent
    for name in ("buses.csv", "branches.csv", "base.json"):
        if not (root / name).exists():
            raise NetworkFormatError(f"missing network file: {root / name}")

    with open(root / "base.json", encoding="utf-8") as fh:
        base = json.load(fh)
    try:
        base_kva = float(base["base_kva"])
        base_kv = float(base["base_kv"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"base.json: invalid base power/voltage ({exc})")
    if base_kva <= 0 or base_kv <= 0:
        raise NetworkFormatError("base.json: bases must be > 0")

    buses_df = _read_csv(root / "buses.csv", {"id", "type", "vmin", "vmax"})
    buses = []
    for line_no, row in enumerate(buses_df.to_dict("records"), start=2):
        kind = str(row["type"]).strip().lower()
        if kind not in ("slack", "pq"):
            raise NetworkFormatError(
                f"{root / 'buses.csv'}:{line_no}: bus type must be slack or pq"
            )
        buses.append(Bus(int(row["id"]), kind, float(row["vmin"]), float(row["vmax"])))

    branches_df = _read_csv(root / "branches.csv", {"id", "from", "to"})
    z_base_ohm = (base_kv * 1e3) ** 2 / (base_kva * 1e3)
    i_base_a = base_kva * 1e3 / (math.sqrt(3.0) * base_kv * 1e3)
    branches = []
    seen_ids: set[str] = set()
    for line_no, d in enumerate(branches_df.to_dict("records"), start=2):
        bid = str(d["id"])
        if bid in seen_ids:
            raise NetworkFormatError(
                f"{root / 'branches.csv'}:{line_no}: duplicated branch id {bid!r}"
            )
        seen_ids.add(bid)
        if "r_pu" in d and not pd.isna(d.get("r_pu")):
            r, x = float(d["r_pu"]), float(d["x_pu"])
            imax = float(d["imax_pu"])
        elif "r_ohm" in d and not pd.isna(d.get("r_ohm")):
            r = float(d["r_ohm"]) / z_base_ohm
            x = float(d["x_ohm"]) / z_base_ohm
            imax = float(d["imax_a"]) / i_base_a
        else:
            raise NetworkFormatError(
                f"{root / 'branches.csv'}:{line_no}: need r_pu/x_pu/imax_pu "
                "or r_ohm/x_ohm/imax_a columns"
            )
        branches.append(Branch(bid, int(d["from"]), int(d["to"]), complex(r, x), imax))

    return NetworkDescription(tuple(buses), tuple(branches), base_kva, base_kv)


def _read_csv(path: Path, required: set[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path)
    except Exception as exc:
        raise NetworkFormatError(f"{path}: parse error: {exc}") from exc
    missing = required - set(df.columns)
    if missing:
        raise NetworkFormatError(f"{path}: missing columns {sorted(missing)}")
    if df.isna().any().any():
        bad = int(df.isna().any(axis=1).idxmax()) + 2
        raise NetworkFormatError(f"{path}:{bad}: missing value")
    return df


# ---------------------------------------------------------------------------
# Exact power flow
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerFlowSolution:
    """Exact solution: complex voltages, branch currents and slack power."""

    voltages: np.ndarray          # complex, per bus
    branch_currents: np.ndarray   # complex, per branch (from -> to)
    slack_power: complex          # injected by the slack bus into the feeder
    iterations: int

    @property
    def voltage_magnitudes(self) -> np.ndarray:
        return np.abs(self.voltages)

    @property
    def current_magnitudes(self) -> np.ndarray:
        return np.abs(self.branch_currents)

    @property
    def gcp_export(self) -> float:
        """Active power delivered to the upstream system, per-unit."""
        return -self.slack_power.real


def solve_power_flow(
    net: NetworkDescription,
    injections: np.ndarray,
    slack_voltage: float = 1.0,
    *,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> PowerFlowSolution:
    """Newton-Raphson power flow for one operating point.

    Parameters
    ----------
    injections:
        Complex generation-positive power per bus (per-unit); the slack entry
        is ignored.
    slack_voltage:
        Slack voltage magnitude, must lie in [0.8, 1.2] pu.

    Raises
    ------
    PowerFlowError
        If the mismatch does not fall below ``tol`` within ``max_iter``
        iterations; this signals an infeasible or extreme operating point.
    """
    injections = np.asarray(injections, dtype=complex)
    if injections.shape != (net.n_bus,):
        raise ValueError(f"injections must have shape ({net.n_bus},)")
    if not (0.8 <= slack_voltage <= 1.2):
        raise ValueError("slack voltage must lie in [0.8, 1.2] pu")

    y = net.admittance_matrix()
    s = net.slack_index
    pq = [i for i in range(net.n_bus) if i != s]
    n = len(pq)

    vm = np.full(net.n_bus, slack_voltage)
    va = np.zeros(net.n_bus)
    p_spec = injections.real
    q_spec = injections.imag

    iterations = 0
    g, b = y.real, y.imag
    for iterations in range(1, max_iter + 1):
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(y @ v)
        dp = p_spec[pq] - s_calc.real[pq]
        dq = q_spec[pq] - s_calc.imag[pq]
        mismatch = max(np.abs(dp).max(initial=0.0), np.abs(dq).max(initial=0.0))
        if mismatch <= tol:
            break
        jac = _jacobian(vm, va, g, b, s_calc, pq)
        try:
            step = np.linalg.solve(jac, np.concatenate([dp, dq]))
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {iterations}") from exc
        va[pq] += step[:n]
        vm[pq] += step[n:]
        if np.any(vm[pq] <= 0.0) or not np.all(np.isfinite(vm[pq])):
            raise PowerFlowError("voltage collapse during Newton iteration")
    else:
        raise PowerFlowError(
            f"power flow did not converge in {max_iter} iterations "
            f"(mismatch {mismatch:.3e} pu)"
        )

    v = vm * np.exp(1j * va)
    currents = np.array(
        [
            (v[net.bus_index(br.from_bus)] - v[net.bus_index(br.to_bus)]) / br.z
            for br in net.branches
        ],
        dtype=complex,
    )
    slack_power = complex(v[s] * np.conj(y[s] @ v))
    return PowerFlowSolution(v, currents, slack_power, iterations)


def _jacobian(vm, va, g, b, s_calc, pq) -> np.ndarray:
    """Polar-form Jacobian restricted to the PQ buses."""
    n_bus = len(vm)
    ang = va[:, None] - va[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    vv = vm[:, None] * vm[None, :]
    # dP/dtheta, dP/dV, dQ/dtheta, dQ/dV (full bus set, then sliced)
    h = vv * (g * sin - b * cos)
    nmat = vm[:, None] * (g * cos + b * sin)
    j = -vv * (g * cos + b * sin)
    lmat = vm[:, None] * (g * sin - b * cos)
    idx = np.arange(n_bus)
    h[idx, idx] = -s_calc.imag - b[idx, idx] * vm**2
    nmat[idx, idx] = s_calc.real / vm + g[idx, idx] * vm
    j[idx, idx] = s_calc.real - g[idx, idx] * vm**2
    lmat[idx, idx] = s_calc.imag / vm - b[idx, idx] * vm
    top = np.hstack([h[np.ix_(pq, pq)], nmat[np.ix_(pq, pq)]])
    bot = np.hstack([j[np.ix_(pq, pq)], lmat[np.ix_(pq, pq)]])
    return np.vstack([top, bot])


# ---------------------------------------------------------------------------
# Affine surrogate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGridModel:
    """Per-time-step affine surrogate of the exact power flow.

    The controllable injection vector ``u`` stacks active then reactive power
    of the controllable buses, time-major within each half:
    ``u = [p^1 .. p^T, q^1 .. q^T]`` with ``p^t`` ordered like
    ``controllable``.  Controllable injections are additive on top of the
    operating point (the controllable units are idle there, any uncontrollable
    prosumption at their buses stays in the offsets), so the surrogate is
    exact at ``u = 0``.  All maps are per-unit.  ``Mb``, ``Mw`` and ``Md``
    carry the affine dependence of the offsets on the stacked uncertainty
    driver.
    """

    controllable: tuple[int, ...]   # bus ids defining the injection columns
    T: int
    n_zeta: int
    G_t: np.ndarray    # (T, 2*n_c)   export sensitivity per step
    b0: np.ndarray     # (T,)
    Mb: np.ndarray     # (T, n_zeta)
    Kv_t: np.ndarray   # (T, n_bus, 2*n_c)
    w0: np.ndarray     # (T, n_bus)
    Mw: np.ndarray     # (T, n_bus, n_zeta)
    Ki_t: np.ndarray   # (T, n_branch, 2*n_c)
    d0: np.ndarray     # (T, n_branch)
    Md: np.ndarray     # (T, n_branch, n_zeta)
    s_base_kva: float
    slack_voltage: float = 1.0

    @property
    def n_c(self) -> int:
        return len(self.controllable)

    @property
    def n_cols(self) -> int:
        return 2 * self.n_c * self.T

    def column(self, kind: str, t: int, slot: int) -> int:
        """Column of ``u`` for active (``"p"``) or reactive (``"q"``) power of
        controllable slot ``slot`` at time ``t``."""
        base = 0 if kind == "p" else self.n_c * self.T
        return base + t * self.n_c + slot

    @property
    def G(self) -> np.ndarray:
        """Stacked export map, shape ``(T, 2*n_c*T)``."""
        n_c, T = self.n_c, self.T
        g = np.zeros((T, 2 * n_c * T))
        for t in range(T):
            g[t, t * n_c:(t + 1) * n_c] = self.G_t[t, :n_c]
            g[t, n_c * T + t * n_c:n_c * T + (t + 1) * n_c] = self.G_t[t, n_c:]
        return g

    def predict_export(self, u: np.ndarray, zeta: np.ndarray | None = None) -> np.ndarray:
        p0 = self.G @ u + self.b0
        if zeta is not None and self.n_zeta:
            p0 = p0 + self.Mb @ zeta
        return p0


def linearize(
    net: NetworkDescription,
    operating_point: np.ndarray,
    slack_voltage: float = 1.0,
    *,
    controllable: list[int] | tuple[int, ...],
    driver_coupling: np.ndarray | None = None,
    step: float = 1e-4,
) -> LinearGridModel:
    """Build the affine surrogate by central differences of the exact solver.

    Parameters
    ----------
    operating_point:
        Complex bus injections, shape ``(n_bus, T)`` (or ``(n_bus,)`` for a
        single step): the uncontrollable prosumption with the controllable
        units idle.  The surrogate is exact there (``u = 0``).
    controllable:
        Bus ids whose additional active/reactive injections form the columns
        of the surrogate maps.
    driver_coupling:
        Optional complex array of shape ``(T, n_bus, n_dr)``: injection shift
        per unit of driver ``d`` at time ``t``.  The stacked uncertainty vector
        is driver-major, ``zeta = [d0 over t, d1 over t, ...]`` with
        ``n_zeta = n_dr * T``; only the same-time entries couple.
    """
    op = np.asarray(operating_point, dtype=complex)
    if op.ndim == 1:
        op = op[:, None]
    if op.shape[0] != net.n_bus:
        raise ValueError("operating_point must have one row per bus")
    T = op.shape[1]
    controllable = tuple(controllable)
    slots = [net.bus_index(b) for b in controllable]
    n_c = len(slots)

    n_dr = 0
    if driver_coupling is not None:
        driver_coupling = np.asarray(driver_coupling, dtype=complex)
        if driver_coupling.shape[:2] != (T, net.n_bus):
            raise ValueError("driver_coupling must have shape (T, n_bus, n_dr)")
        n_dr = driver_coupling.shape[2]
    n_zeta = n_dr * T

    G_t = np.zeros((T, 2 * n_c))
    b0 = np.zeros(T)
    Mb = np.zeros((T, n_zeta))
    Kv = np.zeros((T, net.n_bus, 2 * n_c))
    w0 = np.zeros((T, net.n_bus))
    Mw = np.zeros((T, net.n_bus, n_zeta))
    Ki = np.zeros((T, net.n_branch, 2 * n_c))
    d0 = np.zeros((T, net.n_branch))
    Md = np.zeros((T, net.n_branch, n_zeta))

    for t in range(T):
        base_inj = op[:, t].copy()
        sol = solve_power_flow(net, base_inj, slack_voltage)

        def sensitivities(delta: np.ndarray):
            hi = solve_power_flow(net, base_inj + delta, slack_voltage)
            lo = solve_power_flow(net, base_inj - delta, slack_voltage)
            dv = (hi.voltage_magnitudes - lo.voltage_magnitudes) / (2 * step)
            di = (hi.current_magnitudes - lo.current_magnitudes) / (2 * step)
            dp = (hi.gcp_export - lo.gcp_export) / (2 * step)
            return dp, dv, di

        for k, bus_idx in enumerate(slots):
            for part, col in ((1.0, k), (1.0j, n_c + k)):
                delta = np.zeros(net.n_bus, dtype=complex)
                delta[bus_idx] = part * step
                dp, dv, di = sensitivities(delta)
                G_t[t, col] = dp
                Kv[t, :, col] = dv
                Ki[t, :, col] = di

        # offsets anchored at u = 0: the model is exact with the controllable
        # units idle on top of the operating-point prosumption
        b0[t] = sol.gcp_export
        w0[t] = sol.voltage_magnitudes
        d0[t] = sol.current_magnitudes

        for d in range(n_dr):
            direction = driver_coupling[t, :, d]
            scale = max(np.abs(direction).max(), 1e-12)
            dp, dv, di = sensitivities(direction * (step / scale))
            col = d * T + t
            Mb[t, col] = dp * scale
            Mw[t, :, col] = dv * scale
            Md[t, :, col] = di * scale

    return LinearGridModel(
        controllable, T, n_zeta, G_t, b0, Mb, Kv, w0, Mw, Ki, d0, Md,
        net.base_kva, slack_voltage,
    )


def copperplate_model(
    n_c: int,
    T: int,
    *,
    n_zeta: int = 0,
    b0: np.ndarray | None = None,
    Mb: np.ndarray | None = None,
    s_base_kva: float = 1.0,
) -> LinearGridModel:
    """Lossless single-bus surrogate: the export equals the sum of the
    controllable active injections.  Useful for grid-unaware studies and for
    analytic test instances; it carries no voltage or current maps."""
    G_t = np.zeros((T, 2 * n_c))
    G_t[:, :n_c] = 1.0
    b0 = np.zeros(T) if b0 is None else np.asarray(b0, dtype=float)
    Mb = np.zeros((T, n_zeta)) if Mb is None else np.asarray(Mb, dtype=float)
    empty_b = np.zeros((T, 0, 2 * n_c))
    return LinearGridModel(
        tuple(range(n_c)), T, n_zeta, G_t, b0, Mb,
        empty_b, np.zeros((T, 0)), np.zeros((T, 0, n_zeta)),
        empty_b.copy(), np.zeros((T, 0)), np.zeros((T, 0, n_zeta)),
        s_base_kva,
    )


# ---------------------------------------------------------------------------
# Equality elimination
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisDecomposition:
    """Orthonormal split of the injection space against the export map.

    ``B1`` spans the row space of ``G``; ``B2`` its null space; ``D = G B1``
    is square and invertible.  ``u = B1 x + B2 y`` eliminates the export
    equality from the robust problem.
    """

    B1: np.ndarray
    B2: np.ndarray
    D: np.ndarray
    condition: float

    MAX_CONDITION = 1e12

    @property
    def D_inv(self) -> np.ndarray:
        if self.condition > self.MAX_CONDITION:
            raise RankDeficiencyError(
                f"refusing to invert D with condition number {self.condition:.3e}"
            )
        return np.linalg.inv(self.D)

    @property
    def n_y(self) -> int:
        return self.B2.shape[1]


def reduce_equalities(G: np.ndarray, *, rank_tol: float = 1e-10) -> BasisDecomposition:
    """Rank-revealing orthogonal factorization of ``G`` (full row rank
    required).  Raises :class:`RankDeficiencyError` for rank-deficient maps,
    which signal a degenerate network model."""
    G = np.asarray(G, dtype=float)
    m, n = G.shape
    u, sv, vt = np.linalg.svd(G, full_matrices=True)
    if m > n or sv.size == 0 or sv[-1] <= rank_tol * max(sv[0], 1.0):
        raise RankDeficiencyError(
            f"G has deficient row rank (singular values {sv})"
        )
    B1 = vt[:m].T
    B2 = vt[m:].T
    D = G @ B1
    condition = float(sv[0] / sv[-1])
    return BasisDecomposition(B1, B2, D, condition)
