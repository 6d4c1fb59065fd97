import json
from pathlib import Path

import numpy as np
import pytest

from flexcap import BaseloadMode, BessSpec, NetworkDescription
from flexcap.case import FeederCase, ProsumptionItem, ServiceConfig, resolve_network
from flexcap.netmodel import Branch, Bus
from flexcap.uncertainty import ScenarioSet

DATA = Path(__file__).resolve().parent.parent / "src" / "flexcap" / "data"


@pytest.fixture(scope="session")
def two_bus_net() -> NetworkDescription:
    return NetworkDescription(
        buses=(Bus(1, "slack", 0.9, 1.1), Bus(2, "pq", 0.9, 1.1)),
        branches=(Branch("b1", 1, 2, complex(0.01, 0.01), 2.0),),
        base_kva=1000.0,
        base_kv=12.66,
    )


@pytest.fixture(scope="session")
def ieee33_net() -> NetworkDescription:
    return resolve_network("ieee33")


@pytest.fixture(scope="session")
def ieee33_loads() -> dict[int, complex]:
    doc = json.loads((DATA / "ieee33" / "loads.json").read_text())
    return {int(b): complex(d["p_kw"], d["q_kvar"]) for b, d in doc.items()}


def make_scenarios(
    drivers=("load", "pv"),
    T=4,
    n=300,
    n_in=240,
    seed=7,
    load_mean=0.7,
    load_sd=0.05,
    pv_mean=0.5,
    pv_sd=0.2,
) -> ScenarioSet:
    """Synthetic per-unit driver profiles used across the suite."""
    rng = np.random.default_rng(seed)
    cols = []
    for d in drivers:
        if d == "load":
            base = load_mean + 0.1 * np.sin(np.arange(T))
            cols.append(base + load_sd * rng.standard_normal((n, T)))
        elif d == "pv":
            cols.append(np.clip(pv_mean + pv_sd * rng.standard_normal((n, T)), 0, None))
        elif d == "temp":
            cols.append(278.0 + 3.0 * rng.standard_normal((n, T)))
        else:
            cols.append(rng.standard_normal((n, T)))
    return ScenarioSet(tuple(drivers), T, np.hstack(cols), n_in)


@pytest.fixture
def scenarios_small() -> ScenarioSet:
    return make_scenarios()


def two_bus_case(
    net,
    *,
    T=4,
    services=None,
    baseload=None,
    seed=11,
    uset_kind="hyperbox",
    eps=0.1,
    soe_max=2000.0,
    p_max=500.0,
) -> FeederCase:
    """2-bus feeder with one battery at bus 2 plus load/pv prosumption."""
    scen = make_scenarios(T=T, seed=seed, n=260, n_in=200)
    ders = [
        BessSpec(bus=2, p_min=-p_max, p_max=p_max, q_min=-100, q_max=100,
                 soe_min=0.0, soe_max=soe_max, soe_0=soe_max / 2,
                 c_inv=300000.0, n_cycles=6000.0, name="bess2")
    ]
    pros = [
        ProsumptionItem(bus=2, kind="load", driver="load", rating_kw=300,
                        power_factor=0.95),
        ProsumptionItem(bus=2, kind="pv", driver="pv", rating_kw=150),
    ]
    if services is None:
        services = [
            ServiceConfig("fcr", "symmetric", prices=np.full(T, 12.0),
                          energy_coupling=0.25, throughput_factor=0.5),
            ServiceConfig("afrr_up", "up", prices=np.full(T, 8.0)),
        ]
    if baseload is None:
        baseload = BaseloadMode.controlled(np.linspace(4.0, 6.0, T))
    case = FeederCase(net=net, ders=ders, prosumption=pros, scenarios=scen,
                      services=services, baseload=baseload, uset=None,
                      name="twobus")
    if uset_kind is not None:
        case.uset = case.fit_uncertainty(uset_kind, eps)
    return case


def ieee33_case(
    net,
    loads,
    *,
    T=4,
    seed=5,
    services=None,
    baseload=None,
    uset_kind="hyperbox",
    eps=0.1,
    load_scale=1.0,
) -> FeederCase:
    """IEEE33 feeder with the four-battery fleet and scaled nominal loads."""
    scen = make_scenarios(T=T, seed=seed, n=320, n_in=260, load_sd=0.04, pv_sd=0.1)
    ders = [
        BessSpec(bus=8, p_min=-1000, p_max=1000, q_min=-300, q_max=300,
                 soe_min=0, soe_max=3000, soe_0=1500,
                 c_inv=3e5, n_cycles=6000, name="b8"),
        BessSpec(bus=17, p_min=-1500, p_max=1500, q_min=-400, q_max=400,
                 soe_min=0, soe_max=4500, soe_0=2250,
                 c_inv=4.5e5, n_cycles=6000, name="b17"),
        BessSpec(bus=25, p_min=-2000, p_max=2000, q_min=-600, q_max=600,
                 soe_min=0, soe_max=6000, soe_0=3000,
                 c_inv=6e5, n_cycles=6000, name="b25"),
        BessSpec(bus=33, p_min=-1000, p_max=1000, q_min=-300, q_max=300,
                 soe_min=0, soe_max=3000, soe_0=1500,
                 c_inv=3e5, n_cycles=6000, name="b33"),
    ]
    pros = [
        ProsumptionItem(bus=b, kind="load", driver="load",
                        rating_kw=load_scale * s.real, power_factor=0.95)
        for b, s in loads.items()
    ]
    pros += [
        ProsumptionItem(bus=b, kind="pv", driver="pv", rating_kw=r)
        for b, r in [(5, 100), (11, 200), (14, 100), (18, 500),
                     (20, 100), (25, 50), (28, 200), (32, 150)]
    ]
    if services is None:
        services = [
            ServiceConfig("fcr", "symmetric", prices=np.full(T, 12.0),
                          block_steps=max(1, T // 3) if T % 3 == 0 else 1,
                          energy_coupling=0.25, throughput_factor=0.5),
            ServiceConfig("afrr_up", "up", prices=np.full(T, 9.0)),
        ]
    if baseload is None:
        baseload = BaseloadMode.controlled(np.linspace(4.0, 7.0, T))
    case = FeederCase(net=net, ders=ders, prosumption=pros, scenarios=scen,
                      services=services, baseload=baseload, uset=None,
                      name="ieee33")
    if uset_kind is not None:
        case.uset = case.fit_uncertainty(uset_kind, eps)
    return case


def random_admissible(spec_kind: str, T: int, rng, *, boundary=False) -> np.ndarray:
    xi = rng.standard_normal(T)
    if spec_kind == "up":
        xi = np.abs(xi)
    elif spec_kind == "down":
        xi = -np.abs(xi)
    xi /= max(np.linalg.norm(xi), 1e-30)
    if not boundary:
        xi *= rng.random() ** (1.0 / T)
    return xi
