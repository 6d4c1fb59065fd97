"""Case assembly: wire a network, a DER fleet and scenario data into the
inputs of the aggregation problem.

A :class:`FeederCase` owns the exact network, the controllable fleet, the
uncontrollable prosumption wiring (which scenario driver feeds which bus, at
what rating) and the scenario set.  Building a case runs the exact power flow
at the expected prosumption, linearizes it per time step (optionally at
several slack voltages), embeds the resource blocks into the fleet-wide
injection space, prices the service cost vectors from the battery cycle costs
and returns a ready-to-solve :class:`~flexcap.aggregator.AggregationProblem`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np

from . import aggregator, netmodel, resources, uncertainty
from .aggregator import AggregationError, BaseloadMode, ServiceSpec
from .netmodel import LinearGridModel, NetworkDescription
from .resources import BessSpec, HpSpec, PvSpec
from .uncertainty import ScenarioSet, UncertaintySet


@dataclass(frozen=True)
class ProsumptionItem:
    """Uncontrollable injection tied to a scenario driver: the bus absorbs
    (load) or produces (pv) ``rating_kw * (profile + zeta_driver)``."""

    bus: int
    kind: str                  # "load" | "pv"
    driver: str
    rating_kw: float
    power_factor: float = 1.0

    @property
    def tan_phi(self) -> float:
        pf = min(max(abs(self.power_factor), 1e-6), 1.0)
        return math.sqrt(1.0 - pf * pf) / pf

    def injection_per_driver_unit(self) -> complex:
        sign = -1.0 if self.kind == "load" else 1.0
        return sign * self.rating_kw * complex(1.0, self.tan_phi if self.kind == "load" else 0.0)


@dataclass(frozen=True)
class ServiceConfig:
    """Service definition before cost vectors are attached."""

    name: str
    kind: str
    prices: np.ndarray
    block_steps: int = 1
    eligible: tuple[str, ...] | None = None
    energy_coupling: float = 1.0
    throughput_factor: float = 1.0
    benefits: np.ndarray | None = None


@dataclass
class BuiltCase:
    """Outputs of :meth:`FeederCase.build` needed beyond the solve itself."""

    problem: aggregator.AggregationProblem
    grid: LinearGridModel
    basis: netmodel.BasisDecomposition
    network_rows: resources.LinearConstraintBlock | None
    resource_rows: resources.LinearConstraintBlock
    der_slots: dict[str, int]


@dataclass
class FeederCase:
    net: NetworkDescription
    ders: list
    prosumption: list[ProsumptionItem]
    scenarios: ScenarioSet
    services: list[ServiceConfig]
    baseload: BaseloadMode
    uset: UncertaintySet | None
    dt_hours: float = 1.0
    name: str = "feeder"
    fcr_bias_factor: float = 0.25

    def __post_init__(self):
        buses = [d.bus for d in self.ders]
        if len(set(buses)) != len(buses):
            raise AggregationError("at most one controllable DER per bus")
        for d in self.ders:
            self.net.bus_index(d.bus)
        for item in self.prosumption:
            self.net.bus_index(item.bus)
            if item.driver not in self.scenarios.drivers:
                raise AggregationError(f"unknown scenario driver {item.driver!r}")

    # -- dimensions ----------------------------------------------------------

    @property
    def T(self) -> int:
        return self.scenarios.T

    @property
    def n_c(self) -> int:
        return len(self.ders)

    @property
    def der_slots(self) -> dict[str, int]:
        return {d.label: k for k, d in enumerate(self.ders)}

    @property
    def controllable_buses(self) -> tuple[int, ...]:
        return tuple(d.bus for d in self.ders)

    # -- prosumption wiring ----------------------------------------------------

    def operating_point(self) -> np.ndarray:
        """Expected complex bus injections (per-unit), controllable DERs idle."""
        T = self.T
        op = np.zeros((self.net.n_bus, T), dtype=complex)
        s = self.net.base_kva
        for item in self.prosumption:
            profile = self.scenarios.mean_profile(item.driver)
            op[self.net.bus_index(item.bus)] += (
                item.injection_per_driver_unit() * profile / s
            )
        return op

    def driver_coupling(self) -> np.ndarray:
        """Per-unit injection shift per unit of each driver, shape
        ``(T, n_bus, n_drivers)``."""
        T = self.T
        n_dr = len(self.scenarios.drivers)
        coupling = np.zeros((T, self.net.n_bus, n_dr), dtype=complex)
        s = self.net.base_kva
        for item in self.prosumption:
            d = self.scenarios.drivers.index(item.driver)
            coupling[:, self.net.bus_index(item.bus), d] += (
                item.injection_per_driver_unit() / s
            )
        return coupling

    def bus_injections(self, zeta: np.ndarray | None = None) -> np.ndarray:
        """Uncontrollable complex injections (per-unit) for a realization."""
        op = self.operating_point()
        if zeta is None:
            return op
        coupling = self.driver_coupling()
        T = self.T
        for d in range(len(self.scenarios.drivers)):
            dz = zeta[d * T:(d + 1) * T]
            op += (coupling[:, :, d] * dz[:, None]).T
        return op

    # -- resource blocks ---------------------------------------------------------

    def resource_blocks(self) -> resources.LinearConstraintBlock:
        n_zeta = self.scenarios.dimension
        blocks = []
        for slot, der in enumerate(self.ders):
            if isinstance(der, BessSpec):
                der = replace(der, dt_hours=self.dt_hours)
                block = resources.bess_block(der, self.T, n_zeta=n_zeta)
            elif isinstance(der, HpSpec):
                block = resources.hp_block(der, self.T, dt_hours=self.dt_hours,
                                           n_zeta=n_zeta)
            elif isinstance(der, PvSpec):
                block = resources.pv_block(der, self.T, n_zeta=n_zeta)
            else:
                raise AggregationError(f"unknown DER type {type(der).__name__}")
            blocks.append(resources.embed_block(block, slot, self.n_c, self.T))
        return resources.concat_blocks(blocks)

    def service_specs(self) -> list[ServiceSpec]:
        """Attach per-injection-coordinate cost vectors to the services."""
        n_cols = 2 * self.n_c * self.T
        specs = []
        for cfg in self.services:
            costs = np.zeros(n_cols)
            for slot, der in enumerate(self.ders):
                if isinstance(der, BessSpec):
                    per_kw = der.cost_per_kw(self.dt_hours, cfg.throughput_factor)
                    for t in range(self.T):
                        costs[t * self.n_c + slot] = per_kw
            specs.append(ServiceSpec(
                name=cfg.name, kind=cfg.kind, prices=cfg.prices,
                benefits=cfg.benefits, block_steps=cfg.block_steps,
                eligible=cfg.eligible, costs=costs,
                energy_coupling=cfg.energy_coupling,
            ))
        return specs

    def baseload_mode(self, grid: LinearGridModel) -> BaseloadMode:
        """Resolve deferred baseload fields against the linearized case."""
        bl = self.baseload
        if bl.mode == "controlled" and bl.der_costs is None:
            n_cols = 2 * self.n_c * self.T
            costs = np.zeros(n_cols)
            for slot, der in enumerate(self.ders):
                if isinstance(der, BessSpec):
                    per_kw = der.cost_per_kw(self.dt_hours, 1.0)
                    for t in range(self.T):
                        costs[t * self.n_c + slot] = per_kw
            return BaseloadMode("controlled", energy_prices=bl.energy_prices,
                                der_costs=costs)
        if bl.mode == "self_dispatch" and bl.e0 is None:
            return BaseloadMode("self_dispatch", E0=bl.E0,
                                e0=grid.b0 * grid.s_base_kva)
        return bl

    # -- build and solve -----------------------------------------------------------

    def linearized_grid(self, slack_voltage: float = 1.0) -> LinearGridModel:
        return netmodel.linearize(
            self.net,
            self.operating_point(),
            slack_voltage,
            controllable=self.controllable_buses,
            driver_coupling=self.driver_coupling(),
        )

    def build(
        self,
        *,
        include_network_rows: bool = True,
        delta: float = 0.0,
        ampacity_factor: float = 1.0,
        uset: UncertaintySet | None | str = "default",
    ) -> BuiltCase:
        """Assemble the aggregation problem.

        ``delta > 0`` duplicates the network rows at slack voltages
        ``1 - delta`` and ``1 + delta`` (multifeeder decoupling); the export
        map and basis always come from the nominal linearization.
        """
        net = self.net
        if ampacity_factor != 1.0:
            net = net.with_ampacity_scale(ampacity_factor)
        grid = self.linearized_grid(1.0)
        if grid.n_zeta == 0 and self.scenarios.dimension:
            grid = replace_grid_zeta(grid, self.scenarios.dimension)
        basis = netmodel.reduce_equalities(grid.G)
        blocks = [self.resource_blocks()]
        network_rows = None
        if include_network_rows:
            if delta > 0.0:
                lo = netmodel.linearize(
                    net, self.operating_point(), 1.0 - delta,
                    controllable=self.controllable_buses,
                    driver_coupling=self.driver_coupling(),
                )
                hi = netmodel.linearize(
                    net, self.operating_point(), 1.0 + delta,
                    controllable=self.controllable_buses,
                    driver_coupling=self.driver_coupling(),
                )
                network_rows = resources.concat_blocks([
                    aggregator.network_block(net, lo, label_suffix=":lo"),
                    aggregator.network_block(net, hi, label_suffix=":hi"),
                ])
            else:
                network_rows = aggregator.network_block(net, grid)
            blocks.append(network_rows)
        chosen = self.uset if isinstance(uset, str) else uset
        baseload = self.baseload_mode(grid)
        problem = aggregator.build_problem(
            grid, basis, blocks, self.service_specs(), baseload, chosen,
            dt_hours=self.dt_hours, der_slots=self.der_slots, name=self.name,
        )
        return BuiltCase(problem, grid, basis, network_rows, blocks[0],
                         self.der_slots)

    def solve(self, **build_kw) -> aggregator.AggregationResult:
        built = self.build(**build_kw)
        return aggregator.solve_aggregation(built.problem)

    def fit_uncertainty(self, kind: str, eps: float) -> UncertaintySet:
        if kind == "hyperbox":
            return uncertainty.hyperbox(self.scenarios, eps)
        if kind == "gaussian":
            return uncertainty.fit_gaussian_ellipsoid(self.scenarios, eps)
        if kind == "robust":
            return uncertainty.min_volume_ellipsoid(self.scenarios.deviations("in"))
        if kind == "coverage":
            return uncertainty.coverage_ellipsoid(self.scenarios, eps)
        raise ValueError(f"unknown uncertainty set kind {kind!r}")


def replace_grid_zeta(grid: LinearGridModel, n_zeta: int) -> LinearGridModel:
    """Widen a zeta-free grid model with zero uncertainty maps."""
    from dataclasses import replace as dc_replace

    return dc_replace(
        grid,
        n_zeta=n_zeta,
        Mb=np.zeros((grid.T, n_zeta)),
        Mw=np.zeros((grid.T, grid.w0.shape[1], n_zeta)),
        Md=np.zeros((grid.T, grid.d0.shape[1], n_zeta)),
    )


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------


def bundled_network_path(name: str) -> Path:
    """Path of a network bundled with the package (``ieee33``)."""
    root = importlib_resources.files("flexcap").joinpath("data", name)
    return Path(str(root))


def resolve_network(spec: str | Path) -> NetworkDescription:
    path = Path(spec)
    if not path.exists():
        candidate = bundled_network_path(str(spec))
        if candidate.exists():
            path = candidate
    return netmodel.load_network(path)


def load_fleet(path: str | Path, scenarios: ScenarioSet, T: int) -> list:
    """Parse the DER fleet JSON (records with kind ``bess``/``hp``/``pv``)."""
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise ValueError("fleet file must hold a JSON array of resource records")
    return [der_from_record(rec, scenarios, T) for rec in records]


def der_from_record(rec: dict, scenarios: ScenarioSet, T: int):
    kind = rec.get("kind")
    name = rec.get("name", "")
    if kind == "bess":
        return BessSpec(
            bus=int(rec["bus"]),
            p_min=float(rec["p_min_kw"]), p_max=float(rec["p_max_kw"]),
            q_min=float(rec.get("q_min_kvar", 0.0)),
            q_max=float(rec.get("q_max_kvar", 0.0)),
            soe_min=float(rec["soe_min_kwh"]), soe_max=float(rec["soe_max_kwh"]),
            soe_0=rec.get("soe_0_kwh"),
            c_inv=float(rec.get("c_inv", 0.0)),
            n_cycles=float(rec.get("n_cycles", 6000.0)),
            name=name,
        )
    if kind == "hp":
        driver = rec.get("temperature_driver")
        H = None
        t_inf0 = None
        if driver is not None:
            sl = scenarios.driver_slice(driver)
            H = np.zeros((T, scenarios.dimension))
            H[:, sl] = np.eye(T)
            t_inf0 = scenarios.mean_profile(driver)
        if "t_inf0_k" in rec:
            val = rec["t_inf0_k"]
            t_inf0 = np.full(T, float(val)) if np.isscalar(val) else np.asarray(val, float)
        return HpSpec(
            bus=int(rec["bus"]),
            p_min=float(rec.get("p_min_kw", 0.0)), p_max=float(rec["p_max_kw"]),
            m_bt=float(rec["m_bt_kg"]), l_bt=float(rec.get("l_bt_kw", 0.0)),
            a_hp=float(rec["a_hp"]), q0_hp=float(rec.get("q0_hp_kw", 0.0)),
            h_demand=float(rec["h_demand_kw_per_k"]),
            t_comfort=float(rec["t_comfort_k"]),
            t_min=float(rec["t_min_k"]), t_max=float(rec["t_max_k"]),
            t_0=rec.get("t_0_k"), t_inf0=t_inf0, H=H, name=name,
        )
    if kind == "pv":
        rating = float(rec["rating_kw"])
        driver = rec.get("profile_driver")
        if driver is not None:
            sl = scenarios.driver_slice(driver)
            mpp0 = np.clip(rating * scenarios.mean_profile(driver), 0.0, None)
            M = np.zeros((T, scenarios.dimension))
            M[:, sl] = rating * np.eye(T)
        else:
            mpp0 = np.asarray(rec["mpp_kw"], float)
            M = None
        return PvSpec(bus=int(rec["bus"]), mpp0=mpp0, M_pv=M,
                      curtailable=bool(rec.get("curtailable", True)), name=name)
    raise ValueError(f"unknown DER kind {kind!r}")


def load_prices(path: str | Path, services: list[str], T: int) -> tuple[dict[str, np.ndarray], float]:
    """Read the ``t,service,price`` CSV; the step length is stated in a
    ``# dt_hours=..`` header comment (default 1.0)."""
    dt_hours = 1.0
    rows: list[tuple[int, str, float]] = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "dt_hours=" in line:
                    dt_hours = float(line.split("dt_hours=")[1].split()[0])
                continue
            if line.lower().startswith("t,"):
                continue
            t_s, svc, price = line.split(",")
            rows.append((int(t_s), svc.strip(), float(price)))
    prices = {name: np.zeros(T) for name in services}
    for t, svc, price in rows:
        if svc in prices and 0 <= t < T:
            prices[svc][t] = price
    return prices, dt_hours


def case_from_config(doc: dict, base_dir: Path) -> FeederCase:
    """Build a :class:`FeederCase` from a parsed run-configuration document."""

    def path_of(key: str) -> Path:
        p = Path(doc[key])
        return p if p.is_absolute() else base_dir / p

    T = int(doc["horizon"])
    dt_hours = float(doc.get("dt_hours", 1.0))
    scen_kw = {}
    if "in_sample" in doc:
        scen_kw["in_sample"] = doc["in_sample"]
    scenarios = ScenarioSet.from_csv(path_of("scenarios"), **scen_kw)
    if scenarios.T != T:
        raise ValueError(
            f"scenario columns cover {scenarios.T} steps but horizon is {T}"
        )
    net = resolve_network(doc["network"] if Path(str(doc["network"])).is_absolute()
                          else (base_dir / doc["network"]
                                if (base_dir / str(doc["network"])).exists()
                                else doc["network"]))
    ders = load_fleet(path_of("fleet"), scenarios, T)

    service_names = [s["name"] for s in doc.get("services", [])]
    price_map: dict[str, np.ndarray] = {}
    prices_dt = dt_hours
    if "prices" in doc and service_names:
        price_map, prices_dt = load_prices(path_of("prices"), service_names, T)
        if abs(prices_dt - dt_hours) > 1e-9:
            raise ValueError("price file step length disagrees with the config")
    services = []
    for s in doc.get("services", []):
        if "prices" in s:
            prices = np.asarray(s["prices"], float)
        else:
            prices = price_map[s["name"]]
        prices = prices * float(s.get("price_scale", 1.0))
        services.append(ServiceConfig(
            name=s["name"], kind=s["kind"], prices=prices,
            block_steps=int(s.get("block_steps", 1)),
            eligible=tuple(s["eligible"]) if s.get("eligible") else None,
            energy_coupling=float(s.get("energy_coupling", 1.0)),
            throughput_factor=float(s.get("throughput_factor", 1.0)),
        ))

    bl_doc = doc.get("baseload", {"mode": "uncontrolled"})
    mode = bl_doc.get("mode", "uncontrolled")
    if mode == "uncontrolled":
        baseload = BaseloadMode.uncontrolled()
    elif mode == "controlled":
        baseload = BaseloadMode.controlled(np.asarray(bl_doc["energy_prices"], float))
    elif mode == "self_dispatch":
        e0 = bl_doc.get("e0")
        baseload = BaseloadMode(
            "self_dispatch",
            E0=np.asarray(bl_doc["E0"], float),
            e0=None if e0 is None else np.asarray(e0, float),
        )
    else:
        raise ValueError(f"unknown baseload mode {mode!r}")

    prosumption = [
        ProsumptionItem(
            bus=int(p["bus"]), kind=p.get("kind", "load"), driver=p["driver"],
            rating_kw=float(p["rating_kw"]),
            power_factor=float(p.get("power_factor", 1.0)),
        )
        for p in doc.get("prosumption", [])
    ]

    case = FeederCase(
        net=net, ders=ders, prosumption=prosumption, scenarios=scenarios,
        services=services, baseload=baseload, uset=None, dt_hours=dt_hours,
        name=str(doc.get("name", "feeder")),
    )
    unc = doc.get("uncertainty")
    if unc:
        case.uset = case.fit_uncertainty(unc["kind"], float(unc.get("eps", 0.1)))
    return case
