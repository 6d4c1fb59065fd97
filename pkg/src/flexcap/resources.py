"""Linear capability constraints of the controllable resources.

Each resource type is expanded over the horizon into a block of inequality
rows ``W u <= z0 + Mz zeta`` on the stacked injection vector of its own bus
(``u = [p^1..p^T, q^1..q^T]``, generation-positive, kW).  State recursions
(battery state of energy, buffer-tank temperature) are eliminated into rows on
cumulative power sums.  Blocks for a single resource have ``2*T`` columns and
are embedded into the fleet-wide injection space with :func:`embed_block`.

Row kinds distinguish instantaneous ``power`` rows from cumulative ``state``
rows; the aggregation stage scales ``state`` rows by a per-service energy
coupling factor (frequency-containment products only bias the stored energy by
a fraction of the committed power).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

WATER_HEAT_CAPACITY = 4200.0  # J/(kg K)

ROW_POWER = "power"
ROW_STATE = "state"


@dataclass(frozen=True)
class LinearConstraintBlock:
    """Inequality rows ``W u <= z0 + Mz zeta`` with one label per row."""

    W: np.ndarray
    z0: np.ndarray
    Mz: np.ndarray
    labels: tuple[str, ...]
    kinds: tuple[str, ...]
    pin_baseload: dict[int, np.ndarray] = field(default_factory=dict)
    # pin_baseload maps an injection column to the (1 + n_zeta,) affine target
    # [offset, map...] its baseload component must track (non-curtailable PV).

    def __post_init__(self):
        m = self.W.shape[0]
        if not (len(self.z0) == len(self.labels) == len(self.kinds) == m):
            raise ValueError("inconsistent row counts in constraint block")
        if self.Mz.shape[0] != m:
            raise ValueError("Mz must have one row per constraint")

    @property
    def n_rows(self) -> int:
        return self.W.shape[0]

    @property
    def n_cols(self) -> int:
        return self.W.shape[1]

    def evaluate(self, u: np.ndarray, zeta: np.ndarray | None = None) -> np.ndarray:
        """Row slacks ``z0 + Mz zeta - W u`` (nonnegative iff satisfied)."""
        rhs = self.z0.copy()
        if zeta is not None and self.Mz.shape[1]:
            rhs = rhs + self.Mz @ zeta
        return rhs - self.W @ u


def concat_blocks(blocks: list[LinearConstraintBlock]) -> LinearConstraintBlock:
    if not blocks:
        raise ValueError("no blocks to concatenate")
    widths = {b.n_cols for b in blocks}
    if len(widths) != 1:
        raise ValueError(f"blocks have inconsistent widths {sorted(widths)}")
    zcols = {b.Mz.shape[1] for b in blocks}
    if len(zcols) != 1:
        raise ValueError("blocks have inconsistent uncertainty dimensions")
    pins: dict[int, np.ndarray] = {}
    for b in blocks:
        pins.update(b.pin_baseload)
    return LinearConstraintBlock(
        np.vstack([b.W for b in blocks]),
        np.concatenate([b.z0 for b in blocks]),
        np.vstack([b.Mz for b in blocks]),
        tuple(l for b in blocks for l in b.labels),
        tuple(k for b in blocks for k in b.kinds),
        pins,
    )


def embed_block(
    block: LinearConstraintBlock, slot: int, n_c: int, T: int
) -> LinearConstraintBlock:
    """Embed a single-resource block (2*T columns) into the fleet-wide
    injection space (2*n_c*T columns) at controllable slot ``slot``."""
    if block.n_cols != 2 * T:
        raise ValueError("expected a single-resource block with 2*T columns")
    w = np.zeros((block.n_rows, 2 * n_c * T))
    p_cols = [t * n_c + slot for t in range(T)]
    q_cols = [n_c * T + t * n_c + slot for t in range(T)]
    w[:, p_cols] = block.W[:, :T]
    w[:, q_cols] = block.W[:, T:]
    pins = {p_cols[t]: aff for t, aff in block.pin_baseload.items()}
    return LinearConstraintBlock(w, block.z0, block.Mz, block.labels, block.kinds, pins)


# ---------------------------------------------------------------------------
# Resource specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BessSpec:
    """Battery storage: power box, reactive box and SOE window over the
    horizon.  Power in kW (injection-positive: discharge > 0), energy in kWh."""

    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    soe_min: float
    soe_max: float
    soe_0: float | None = None
    c_inv: float = 0.0
    n_cycles: float = 6000.0
    dt_hours: float = 1.0
    name: str = ""

    def __post_init__(self):
        if not (self.p_min <= 0.0 <= self.p_max):
            raise ValueError("BESS power box must contain zero")
        soe_0 = self.initial_soe
        if not (self.soe_min <= soe_0 <= self.soe_max):
            raise ValueError("initial SOE outside the SOE window")
        if self.n_cycles <= 0:
            raise ValueError("rated cycle count must be > 0")

    @property
    def initial_soe(self) -> float:
        if self.soe_0 is None:
            return 0.5 * (self.soe_min + self.soe_max)
        return self.soe_0

    @property
    def label(self) -> str:
        return self.name or f"bess{self.bus}"

    def cost_per_kw(self, dt_hours: float, throughput_factor: float = 1.0) -> float:
        """Operating cost of one kW of capacity held for one step, from the
        cycle cost and the service's relative energy throughput."""
        if self.soe_max <= 0:
            return 0.0
        cycles = throughput_factor * dt_hours / (2.0 * self.soe_max)
        return cycle_cost(self.c_inv, self.n_cycles) * cycles


@dataclass(frozen=True)
class HpSpec:
    """Heat pump with a water buffer tank and temperature-dependent demand.

    Electric power bounds are consumption-positive; the heat balance is
    ``T_bt^{t+1} - T_bt^t = dt/(4200 m_bt) (Q_hp - Q_demand - l_bt)`` with
    ``Q_hp = a_hp p_hp + Q0_hp`` and ``Q_demand = h_demand (T_c - T_inf)``,
    ``T_inf = T_inf0 + H zeta``.  Powers in kW, temperatures in K.
    """

    bus: int
    p_min: float
    p_max: float
    m_bt: float                 # buffer tank mass, kg
    l_bt: float                 # standing losses, kW
    a_hp: float                 # heat output per electric kW
    q0_hp: float                # constant heat term, kW
    h_demand: float             # heat demand per kelvin, kW/K
    t_comfort: float
    t_min: float
    t_max: float
    t_0: float | None = None
    t_inf0: np.ndarray | None = None   # (T,) base environmental temperature
    H: np.ndarray | None = None        # (T, n_zeta) temperature uncertainty map
    name: str = ""

    def __post_init__(self):
        if self.m_bt <= 0:
            raise ValueError("buffer tank mass must be > 0")
        if self.p_min < 0:
            raise ValueError("heat pump consumption must be nonnegative")
        if not (self.t_min <= self.initial_temperature <= self.t_max):
            raise ValueError("initial tank temperature outside bounds")

    @property
    def initial_temperature(self) -> float:
        if self.t_0 is None:
            return 0.5 * (self.t_min + self.t_max)
        return self.t_0

    @property
    def label(self) -> str:
        return self.name or f"hp{self.bus}"

    def kelvin_per_kwh(self) -> float:
        """Tank temperature rise per kWh of net heat."""
        return 3.6e6 / (WATER_HEAT_CAPACITY * self.m_bt)


@dataclass(frozen=True)
class PvSpec:
    """Photovoltaic plant with an uncertain maximum power point.

    ``mpp0`` is the forecast MPP series (kW); ``M_pv`` maps the stacked
    uncertainty driver to MPP deviations.  When not curtailable, the plant
    must track its MPP in the baseload plan and only service activations may
    deviate from it.
    """

    bus: int
    mpp0: np.ndarray
    M_pv: np.ndarray | None = None
    curtailable: bool = True
    name: str = ""

    def __post_init__(self):
        if np.any(np.asarray(self.mpp0) < 0):
            raise ValueError("MPP series must be nonnegative")

    @property
    def label(self) -> str:
        return self.name or f"pv{self.bus}"


# ---------------------------------------------------------------------------
# Block constructors
# ---------------------------------------------------------------------------


def _finite_rows(rows, z, labels, kinds, n_zeta, mz_rows=None):
    """Drop rows with infinite right-hand side, stack the rest."""
    W, z0, Mz, lab, knd = [], [], [], [], []
    for k, row in enumerate(rows):
        if not np.isfinite(z[k]):
            continue
        W.append(row)
        z0.append(z[k])
        Mz.append(np.zeros(n_zeta) if mz_rows is None else mz_rows[k])
        lab.append(labels[k])
        knd.append(kinds[k])
    n_cols = len(rows[0]) if rows else 0
    if not W:
        return (np.zeros((0, n_cols)), np.zeros(0), np.zeros((0, n_zeta)), (), ())
    return (np.array(W), np.array(z0), np.array(Mz), tuple(lab), tuple(knd))


def bess_block(spec: BessSpec, T: int, *, n_zeta: int = 0) -> LinearConstraintBlock:
    """Power box and SOE-window rows with the SOE recursion eliminated:
    ``SOE^{t+1} = SOE^t - p^t dt`` turns the window into bounds on cumulative
    sums of the injection.  Rows are independent of the uncertainty."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    dt = spec.dt_hours
    rows, z, labels, kinds = [], [], [], []
    for t in range(T):
        for sign, bound, tag in (
            (1.0, spec.p_max, "p_max"),
            (-1.0, -spec.p_min, "p_min"),
        ):
            r = np.zeros(2 * T)
            r[t] = sign
            rows.append(r)
            z.append(bound)
            labels.append(f"{spec.label}:{tag}[{t}]")
            kinds.append(ROW_POWER)
        for sign, bound, tag in (
            (1.0, spec.q_max, "q_max"),
            (-1.0, -spec.q_min, "q_min"),
        ):
            r = np.zeros(2 * T)
            r[T + t] = sign
            rows.append(r)
            z.append(bound)
            labels.append(f"{spec.label}:{tag}[{t}]")
            kinds.append(ROW_POWER)
    soe0 = spec.initial_soe
    for t in range(T):
        cum = np.zeros(2 * T)
        cum[: t + 1] = dt
        # SOE^{t+1} >= soe_min  <=>  sum p*dt <= soe_0 - soe_min
        rows.append(cum.copy())
        z.append(soe0 - spec.soe_min)
        labels.append(f"{spec.label}:soe_min[{t}]")
        kinds.append(ROW_STATE)
        rows.append(-cum)
        z.append(spec.soe_max - soe0)
        labels.append(f"{spec.label}:soe_max[{t}]")
        kinds.append(ROW_STATE)
    return LinearConstraintBlock(*_finite_rows(rows, z, labels, kinds, n_zeta))


def hp_block(spec: HpSpec, T: int, *, dt_hours: float = 1.0,
             n_zeta: int = 0) -> LinearConstraintBlock:
    """Electric power box and tank-temperature window with the thermal
    recursion eliminated.  The injection coordinate is generation-positive, so
    consumption ``p_hp = -p``; environmental-temperature uncertainty enters
    the right-hand side through the map ``H``."""
    if T < 1:
        raise ValueError("horizon must be >= 1")
    t_inf0 = np.full(T, spec.t_comfort) if spec.t_inf0 is None else np.asarray(spec.t_inf0, float)
    if t_inf0.shape != (T,):
        raise ValueError("t_inf0 must have length T")
    H = np.zeros((T, n_zeta)) if spec.H is None else np.asarray(spec.H, float)
    if H.shape != (T, n_zeta):
        raise ValueError(f"H must have shape ({T}, {n_zeta})")

    kappa = spec.kelvin_per_kwh() * dt_hours  # K per kW of net heat over one step
    rows, z, labels, kinds, mz = [], [], [], [], []
    for t in range(T):
        # consumption box: p_min <= -p <= p_max
        r = np.zeros(2 * T)
        r[t] = -1.0
        rows.append(r.copy())
        z.append(spec.p_max)
        labels.append(f"{spec.label}:p_max[{t}]")
        kinds.append(ROW_POWER)
        mz.append(np.zeros(n_zeta))
        rows.append(-r)
        z.append(-spec.p_min)
        labels.append(f"{spec.label}:p_min[{t}]")
        kinds.append(ROW_POWER)
        mz.append(np.zeros(n_zeta))
        # lock reactive power
        rq = np.zeros(2 * T)
        rq[T + t] = 1.0
        rows.extend([rq.copy(), -rq])
        z.extend([0.0, 0.0])
        labels.extend([f"{spec.label}:q_max[{t}]", f"{spec.label}:q_min[{t}]"])
        kinds.extend([ROW_POWER, ROW_POWER])
        mz.extend([np.zeros(n_zeta), np.zeros(n_zeta)])

    demand0 = spec.h_demand * (spec.t_comfort - t_inf0)              # kW
    drift = kappa * (spec.q0_hp - spec.l_bt - demand0)               # K per step
    for t in range(T):
        # T^{t+1} = T0 + sum_{tau<=t} [kappa*(-a_hp p_tau) + drift_tau
        #                              + kappa*h_demand*(H zeta)_tau]
        cum = np.zeros(2 * T)
        cum[: t + 1] = -kappa * spec.a_hp
        const = spec.initial_temperature + drift[: t + 1].sum()
        hrow = kappa * spec.h_demand * H[: t + 1].sum(axis=0)
        # upper bound: cum_p_part + hrow zeta + const <= t_max
        rows.append(cum.copy())
        z.append(spec.t_max - const)
        labels.append(f"{spec.label}:t_max[{t}]")
        kinds.append(ROW_STATE)
        mz.append(-hrow)
        rows.append(-cum)
        z.append(const - spec.t_min)
        labels.append(f"{spec.label}:t_min[{t}]")
        kinds.append(ROW_STATE)
        mz.append(hrow)
    return LinearConstraintBlock(*_finite_rows(rows, z, labels, kinds, n_zeta, mz))


def pv_block(spec: PvSpec, T: int, *, n_zeta: int = 0) -> LinearConstraintBlock:
    """Curtailable PV: ``0 <= p <= MPP(zeta)``.  Non-curtailable PV keeps the
    MPP cap and marks the baseload component to be pinned to the MPP; service
    contributions remain bounded by the cap."""
    mpp0 = np.asarray(spec.mpp0, float)
    if mpp0.shape != (T,):
        raise ValueError("mpp0 must have length T")
    M = np.zeros((T, n_zeta)) if spec.M_pv is None else np.asarray(spec.M_pv, float)
    if M.shape != (T, n_zeta):
        raise ValueError(f"M_pv must have shape ({T}, {n_zeta})")

    rows, z, labels, kinds, mz = [], [], [], [], []
    for t in range(T):
        r = np.zeros(2 * T)
        r[t] = 1.0
        rows.append(r.copy())
        z.append(mpp0[t])
        labels.append(f"{spec.label}:mpp[{t}]")
        kinds.append(ROW_POWER)
        mz.append(M[t])
        rows.append(-r)
        z.append(0.0)
        labels.append(f"{spec.label}:p_min[{t}]")
        kinds.append(ROW_POWER)
        mz.append(np.zeros(n_zeta))
        rq = np.zeros(2 * T)
        rq[T + t] = 1.0
        rows.extend([rq.copy(), -rq])
        z.extend([0.0, 0.0])
        labels.extend([f"{spec.label}:q_max[{t}]", f"{spec.label}:q_min[{t}]"])
        kinds.extend([ROW_POWER, ROW_POWER])
        mz.extend([np.zeros(n_zeta), np.zeros(n_zeta)])

    pins: dict[int, np.ndarray] = {}
    if not spec.curtailable:
        for t in range(T):
            pins[t] = np.concatenate([[mpp0[t]], M[t]])
    block = LinearConstraintBlock(*_finite_rows(rows, z, labels, kinds, n_zeta, mz))
    return replace(block, pin_baseload=pins)


# ---------------------------------------------------------------------------
# Operating-cost estimation from frequency data
# ---------------------------------------------------------------------------


def cycle_cost(c_inv: float, n_cycles: float) -> float:
    """Cost of one equivalent cycle: investment cost over rated cycles."""
    if n_cycles <= 0:
        raise ValueError("rated cycle count must be > 0")
    return c_inv / n_cycles


@dataclass(frozen=True)
class FcrEnergyStats:
    """Per-block relative energy bias and throughput of a normalized
    frequency-containment droop response, plus their 95th percentiles."""

    bias: np.ndarray
    throughput: np.ndarray
    block_hours: float

    @property
    def bias_p95(self) -> float:
        return float(np.percentile(self.bias, 95))

    @property
    def throughput_p95(self) -> float:
        return float(np.percentile(self.throughput, 95))


def fcr_energy_requirements(
    times_s: np.ndarray,
    frequency_hz: np.ndarray,
    block_hours: float,
    *,
    nominal_hz: float = 50.0,
    full_activation_hz: float = 0.2,
) -> FcrEnergyStats:
    """Estimate per-block energy needs of frequency-containment provision.

    The activation is the normalized droop response to the frequency
    deviation, saturated at one per-unit power for deviations beyond
    ``full_activation_hz``.  Per block of ``block_hours``:

    * bias = ``|integral p dt| / block_hours`` (net stored-energy change per
      unit bid),
    * throughput = ``integral |p| dt / block_hours``.
    """
    times_s = np.asarray(times_s, float)
    frequency_hz = np.asarray(frequency_hz, float)
    if times_s.size == 0:
        raise ValueError("empty frequency series")
    if times_s.shape != frequency_hz.shape:
        raise ValueError("timestamps and samples must align")
    if times_s.size < 2:
        raise ValueError("need at least two samples")
    steps = np.diff(times_s)
    dt = steps[0]
    if dt <= 0 or not np.allclose(steps, dt, rtol=1e-6, atol=1e-9):
        raise ValueError("frequency series must be uniformly sampled without gaps")

    activation = np.clip(-(frequency_hz - nominal_hz) / full_activation_hz, -1.0, 1.0)
    per_block = int(round(block_hours * 3600.0 / dt))
    if per_block < 1 or activation.size < per_block:
        raise ValueError("series shorter than one block")
    n_blocks = activation.size // per_block
    dt_h = dt / 3600.0
    blocks = activation[: n_blocks * per_block].reshape(n_blocks, per_block)
    bias = np.abs(blocks.sum(axis=1)) * dt_h / block_hours
    throughput = np.abs(blocks).sum(axis=1) * dt_h / block_hours
    return FcrEnergyStats(bias, throughput, block_hours)
