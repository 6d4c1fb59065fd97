import numpy as np
import pytest

from flexcap import BaseloadMode, BessSpec, InfeasibleError, NetworkDescription
from flexcap.case import FeederCase, ProsumptionItem, ServiceConfig
from flexcap.multifeeder import (
    CombinedResult,
    FeederBundle,
    combine_feeders,
    disaggregate_chain,
    gcp_baseload_range,
    solve_feeders,
)
from flexcap.netmodel import Branch, Bus
from flexcap.uncertainty import ScenarioSet

from conftest import make_scenarios, random_admissible


def feeder(name, *, seed=1, scenarios=None, T=3, p_max=500.0,
           v_band=(0.9, 1.1), prices=(10.0, 5.0)):
    scen = scenarios if scenarios is not None else make_scenarios(
        drivers=("load",), T=T, n=160, n_in=130, seed=seed)
    net = NetworkDescription(
        buses=(Bus(1, "slack", *v_band), Bus(2, "pq", *v_band),
               Bus(3, "pq", *v_band)),
        branches=(Branch("a", 1, 2, complex(0.01, 0.02), 3.0),
                  Branch("b", 2, 3, complex(0.02, 0.02), 2.0)),
        base_kva=1000.0, base_kv=10.0)
    ders = [BessSpec(bus=3, p_min=-p_max, p_max=p_max, q_min=-100, q_max=100,
                     soe_min=0, soe_max=4 * p_max, soe_0=2 * p_max,
                     name=f"bess-{name}")]
    pros = [ProsumptionItem(bus=2, kind="load", driver="load", rating_kw=300,
                            power_factor=0.95)]
    services = [
        ServiceConfig("fcr", "symmetric", prices=np.full(T, prices[0]),
                      energy_coupling=0.25),
        ServiceConfig("up", "up", prices=np.full(T, prices[1])),
    ]
    case = FeederCase(net=net, ders=ders, prosumption=pros, scenarios=scen,
                      services=services,
                      baseload=BaseloadMode.controlled(np.full(T, 3.0)),
                      uset=None, name=name)
    case.uset = case.fit_uncertainty("hyperbox", 0.1)
    return case


class TestSolveFeeders:
    def test_zero_delta_matches_single_solve(self):
        case = feeder("f")
        single = case.solve()
        bundle = FeederBundle([case], delta=0.0)
        [res] = solve_feeders(bundle)
        assert res.objective == pytest.approx(single.objective, rel=1e-6)

    def test_positive_delta_never_helps(self):
        # tight voltage bounds make the duplicated rows bind
        case = feeder("f", v_band=(0.97, 1.03), p_max=900.0)
        base = solve_feeders(FeederBundle([case], delta=0.0))[0]
        tight = solve_feeders(FeederBundle([case], delta=0.02))[0]
        assert tight.objective <= base.objective + 1e-6 * abs(base.objective)
        assert tight.objective < base.objective * 0.999

    def test_feeders_solved_independently_order_free(self):
        f1, f2, f3 = (feeder(n, seed=s) for n, s in
                      (("f1", 1), ("f2", 2), ("f3", 3)))
        r_fwd = solve_feeders(FeederBundle([f1, f2, f3], delta=0.01), jobs=3)
        r_rev = solve_feeders(FeederBundle([f3, f2, f1], delta=0.01))
        for a, b in zip(r_fwd, reversed(r_rev)):
            assert a.objective == pytest.approx(b.objective, rel=1e-9)

    def test_infeasible_feeder_named(self):
        bad = feeder("badfeeder")
        bad.baseload = BaseloadMode("self_dispatch", E0=np.full(3, 1e6), e0=None)
        with pytest.raises(InfeasibleError, match="badfeeder"):
            solve_feeders(FeederBundle([bad], delta=0.0))


class TestCombination:
    def test_single_feeder_pass_through(self):
        case = feeder("f")
        bundle = FeederBundle([case], delta=0.0, p_max_transfo_kw=1e7,
                              p_min_transfo_kw=-1e7)
        results = solve_feeders(bundle)
        combined = combine_feeders(results, bundle)
        for name in combined.E:
            assert combined.E[name] == pytest.approx(
                results[0].services[name].E, rel=1e-6, abs=1e-6)

    def test_two_identical_feeders_double(self):
        scen = make_scenarios(drivers=("load",), T=3, n=160, n_in=130, seed=4)
        f1 = feeder("f1", scenarios=scen)
        f2 = feeder("f2", scenarios=scen)
        bundle = FeederBundle([f1, f2], delta=0.0)
        results = solve_feeders(bundle)
        combined = combine_feeders(results, bundle)
        for name in combined.E:
            total = results[0].services[name].E + results[1].services[name].E
            assert combined.E[name] == pytest.approx(total, rel=1e-6, abs=1e-6)
            # the equal split is an admissible policy
            assert np.all(combined.shares[name] <= np.vstack(
                [results[0].services[name].E, results[1].services[name].E])
                + 1e-8)

    def test_transformer_tightening_shrinks_symmetric(self):
        f1, f2 = feeder("f1", seed=5), feeder("f2", seed=6)
        bundle_loose = FeederBundle([f1, f2], delta=0.0,
                                    p_max_transfo_kw=5e4, p_min_transfo_kw=-5e4)
        results = solve_feeders(bundle_loose)
        loose = combine_feeders(results, bundle_loose)
        # bind on the import side only; the symmetric product shrinks anyway
        lo, hi = loose.baseload_lo, loose.baseload_hi
        cap = float(lo.min() - 0.6 * loose.E["fcr"].max())
        bundle_tight = FeederBundle([f1, f2], delta=0.0,
                                    p_max_transfo_kw=5e4, p_min_transfo_kw=cap)
        tight = combine_feeders(results, bundle_tight)
        assert tight.objective < loose.objective
        assert np.all(tight.E["fcr"] <= loose.E["fcr"] + 1e-9)
        assert tight.E["fcr"].max() < loose.E["fcr"].max()

    def test_transformer_below_baseload_infeasible(self):
        f1 = feeder("f1", seed=7)
        bundle = FeederBundle([f1], delta=0.0, p_max_transfo_kw=1e4,
                              p_min_transfo_kw=0.0)  # feeder imports
        results = solve_feeders(bundle)
        with pytest.raises(InfeasibleError, match="transformer"):
            combine_feeders(results, bundle)

    def test_conservative_vs_monolithic_union(self):
        # union network: one slack feeding both feeders' branch chains
        scen = make_scenarios(drivers=("load",), T=3, n=160, n_in=130, seed=8)
        f1 = feeder("f1", scenarios=scen)
        f2 = feeder("f2", scenarios=scen)
        bundle = FeederBundle([f1, f2], delta=0.02)
        results = solve_feeders(bundle)
        combined = combine_feeders(results, bundle)

        union_net = NetworkDescription(
            buses=(Bus(1, "slack", 0.9, 1.1),
                   Bus(2, "pq", 0.9, 1.1), Bus(3, "pq", 0.9, 1.1),
                   Bus(4, "pq", 0.9, 1.1), Bus(5, "pq", 0.9, 1.1)),
            branches=(Branch("a1", 1, 2, complex(0.01, 0.02), 3.0),
                      Branch("b1", 2, 3, complex(0.02, 0.02), 2.0),
                      Branch("a2", 1, 4, complex(0.01, 0.02), 3.0),
                      Branch("b2", 4, 5, complex(0.02, 0.02), 2.0)),
            base_kva=1000.0, base_kv=10.0)
        T = 3
        ders = [BessSpec(bus=3, p_min=-500, p_max=500, q_min=-100, q_max=100,
                         soe_min=0, soe_max=2000, soe_0=1000, name="m1"),
                BessSpec(bus=5, p_min=-500, p_max=500, q_min=-100, q_max=100,
                         soe_min=0, soe_max=2000, soe_0=1000, name="m2")]
        pros = [ProsumptionItem(bus=2, kind="load", driver="load",
                                rating_kw=300, power_factor=0.95),
                ProsumptionItem(bus=4, kind="load", driver="load",
                                rating_kw=300, power_factor=0.95)]
        services = [ServiceConfig("fcr", "symmetric", prices=np.full(T, 10.0),
                                  energy_coupling=0.25),
                    ServiceConfig("up", "up", prices=np.full(T, 5.0))]
        mono_case = FeederCase(net=union_net, ders=ders, prosumption=pros,
                               scenarios=scen, services=services,
                               baseload=BaseloadMode.controlled(np.full(T, 3.0)),
                               uset=None, name="union")
        mono_case.uset = mono_case.fit_uncertainty("hyperbox", 0.1)
        mono = mono_case.solve()
        assert combined.objective <= mono.objective + 1e-6 * mono.objective


@pytest.fixture(scope="module")
def combined():
    f1, f2 = feeder("f1", seed=9), feeder("f2", seed=10)
    bundle = FeederBundle([f1, f2], delta=0.0, p_max_transfo_kw=2e3,
                          p_min_transfo_kw=-5e3)
    results = solve_feeders(bundle)
    return bundle, combine_feeders(results, bundle)


class TestChainDisaggregation:

    def test_zero_activation_reproduces_baselines(self, combined):
        bundle, comb = combined
        parts = disaggregate_chain(comb, {n: np.zeros(3) for n in comb.E})
        for part, res in zip(parts, comb.feeder_results):
            assert part.gcp_baseload == pytest.approx(res.baseload.p0b)

    def test_containment_on_boundary_points(self, combined):
        bundle, comb = combined
        rng = np.random.default_rng(11)
        for _ in range(200):
            for name in comb.E:
                kind = comb.feeder_results[0].services[name].spec.kind
                xi = random_admissible(kind, 3, rng, boundary=True)
                for f in range(2):
                    xi_f = comb.feeder_activation(name, f, xi)
                    assert np.linalg.norm(xi_f) <= 1.0 + 1e-8

    def test_end_to_end_feasibility(self, combined):
        from flexcap.aggregator import evaluate_rows
        bundle, comb = combined
        rng = np.random.default_rng(12)
        worst = np.inf
        for _ in range(100):
            acts = {n: random_admissible(
                comb.feeder_results[0].services[n].spec.kind, 3, rng)
                for n in comb.E}
            zetas = [case.uset.sample(rng, 1)[0] for case in bundle.feeders]
            feeder_acts = [
                {n: comb.feeder_activation(n, f, acts[n]) for n in comb.E}
                for f in range(2)
            ]
            for f, res in enumerate(comb.feeder_results):
                worst = min(worst, evaluate_rows(
                    res, feeder_acts[f], zetas[f]).min())
        assert worst >= -1e-6

    def test_total_power_within_adjusted_rating(self, combined):
        bundle, comb = combined
        rng = np.random.default_rng(13)
        for _ in range(200):
            total = np.zeros(3)
            for name in comb.E:
                kind = comb.feeder_results[0].services[name].spec.kind
                xi = random_admissible(kind, 3, rng, boundary=True)
                total += comb.E[name] * xi
            assert np.all(total + comb.baseload_hi
                          <= bundle.p_max_transfo_kw + 1e-6)
            assert np.all(total + comb.baseload_lo
                          >= bundle.p_min_transfo_kw - 1e-6)


class TestBaseloadRange:
    def test_controlled_range_is_schedule(self):
        case = feeder("f", seed=14)
        res = case.solve()
        lo, hi = gcp_baseload_range(res)
        assert lo == pytest.approx(res.baseload.p0b)
        assert hi == pytest.approx(res.baseload.p0b)

    def test_uncontrolled_range_covers_samples(self):
        case = feeder("f", seed=15)
        case.baseload = BaseloadMode.uncontrolled()
        res = case.solve()
        lo, hi = gcp_baseload_range(res)
        reduced = res.problem.reduced
        rng = np.random.default_rng(0)
        for _ in range(200):
            zeta = case.uset.sample(rng, 1, boundary=True)[0]
            b = reduced.b0 + reduced.Mb @ zeta
            assert np.all(b <= hi + 1e-9) and np.all(b >= lo - 1e-9)

    def test_self_dispatch_range(self):
        case = feeder("f", seed=16)
        case.baseload = BaseloadMode("self_dispatch", E0=np.full(3, 20.0),
                                     e0=None)
        res = case.solve()
        lo, hi = gcp_baseload_range(res)
        assert hi - lo == pytest.approx(np.full(3, 40.0))
