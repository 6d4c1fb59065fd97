import numpy as np
import pytest

from flexcap import BaseloadMode
from flexcap.uncertainty import ScenarioSet, hyperbox
from flexcap.validate import (
    activation_strategies,
    compare_uncertainty_sets,
    comparison_to_csv,
    monte_carlo_validate,
)

from conftest import make_scenarios, two_bus_case


@pytest.fixture(scope="module")
def solved_case(two_bus_net):
    case = two_bus_case(two_bus_net, T=4, p_max=400.0)
    return case, case.solve()


class TestMonteCarloValidate:
    def test_zero_uncertainty_zero_activation(self, two_bus_net):
        case = two_bus_case(two_bus_net)
        # out-of-sample scenarios pinned at the forecast mean
        scen = case.scenarios
        frozen = scen.samples.copy()
        frozen[scen.n_in_sample:] = scen.mean
        case.scenarios = ScenarioSet(scen.drivers, scen.T, frozen,
                                     scen.n_in_sample)
        case.uset = case.fit_uncertainty("hyperbox", 0.1)
        res = case.solve()
        report = monte_carlo_validate(res, case, strategy="zero", seed=1)
        assert report.n_violations == 0
        assert report.n_out_of_set == 0

    def test_in_set_scenarios_never_violate(self, two_bus_net):
        # replace the out-of-sample block with draws from inside the set
        case = two_bus_case(two_bus_net)
        res = case.solve()
        rng = np.random.default_rng(2)
        scen = case.scenarios
        inside = case.uset.sample(rng, scen.samples.shape[0] - scen.n_in_sample)
        patched = scen.samples.copy()
        patched[scen.n_in_sample:] = scen.mean + inside
        case.scenarios = ScenarioSet(scen.drivers, scen.T, patched,
                                     scen.n_in_sample)
        for strategy in ("max_flex", "random_in_set", "per_time_extreme"):
            report = monte_carlo_validate(res, case, strategy=strategy, seed=3)
            assert report.n_out_of_set == 0
            assert report.in_set_violations() == 0

    def test_out_of_set_share_reported(self, two_bus_net):
        # shrink the box so that a known share of scenarios falls outside
        case = two_bus_case(two_bus_net, uset_kind=None)
        dev = case.scenarios.deviations("out")
        radius = np.abs(dev).max(axis=1)
        q = np.quantile(radius, 0.9)
        lo = np.full(case.scenarios.dimension, -q)
        hi = np.full(case.scenarios.dimension, q)
        import flexcap.uncertainty as unc
        case.uset = unc.UncertaintySet(kind="hyperbox", epsilon=0.1,
                                       lower=lo, upper=hi)
        res = case.solve()
        report = monte_carlo_validate(res, case, strategy="max_flex", seed=4)
        assert 0.02 <= report.out_of_set_rate <= 0.2
        assert report.n_violations <= report.n_out_of_set
        # violation rate is computed over all scenarios, in-set or not
        assert report.violation_rate == report.n_violations / report.n_scenarios

    def test_binomial_bound_on_generator_draws(self, two_bus_net):
        # fresh draws from the in-sample generator: violations are bounded by
        # the nominal miss rate plus binomial slack
        case = two_bus_case(two_bus_net, T=4, seed=21)
        scen = make_scenarios(T=4, n=500, n_in=200, seed=99)
        merged = np.vstack([case.scenarios.samples[:case.scenarios.n_in_sample],
                            scen.samples[200:]])
        case.scenarios = ScenarioSet(scen.drivers, 4, merged, 200)
        case.uset = case.fit_uncertainty("hyperbox", 0.1)
        res = case.solve()
        report = monte_carlo_validate(res, case, strategy="max_flex", seed=5)
        n = report.n_scenarios
        eps = 0.1
        bound = eps + 3 * np.sqrt(eps * (1 - eps) / n)
        assert report.violation_rate <= bound

    def test_trajectories_recorded(self, solved_case):
        case, res = solved_case
        report = monte_carlo_validate(res, case, strategy="max_flex", seed=6)
        first = report.outcomes[0]
        assert "bess2" in first.soe
        assert first.soe["bess2"].shape == (case.T + 1,)

    def test_report_serialization(self, solved_case, tmp_path):
        case, res = solved_case
        report = monte_carlo_validate(res, case, strategy="max_flex", seed=7)
        report.write_json(tmp_path / "report.json")
        report.write_csv(tmp_path / "report.csv")
        import json
        doc = json.loads((tmp_path / "report.json").read_text())
        assert doc["seed"] == 7
        assert doc["scenarios"] == report.n_scenarios
        lines = (tmp_path / "report.csv").read_text().strip().splitlines()
        assert len(lines) == report.n_scenarios + 1

    def test_parallel_matches_serial(self, solved_case):
        case, res = solved_case
        a = monte_carlo_validate(res, case, strategy="random_in_set", seed=8,
                                 jobs=1, keep_trajectories=False)
        b = monte_carlo_validate(res, case, strategy="random_in_set", seed=8,
                                 jobs=4, keep_trajectories=False)
        assert a.to_json() == b.to_json()

    def test_current_delta_regression_bound(self, solved_case):
        case, res = solved_case
        report = monte_carlo_validate(res, case, strategy="max_flex", seed=9)
        assert report.max_current_delta_rel <= 0.05


class TestActivationStrategies:
    def test_zero_strategy(self, solved_case):
        _, res = solved_case
        acts = activation_strategies(res)["zero"]()
        assert all(np.all(v == 0) for v in acts.values())

    def test_max_flex_equal_capacity_direction(self, two_bus_net):
        from flexcap.case import ServiceConfig
        case = two_bus_case(
            two_bus_net, T=4,
            services=[ServiceConfig("up", "up", prices=np.full(4, 5.0))],
            uset_kind="hyperbox")
        res = case.solve()
        E = res.services["up"].E
        assert np.ptp(E) < 1e-3 * E.max()  # equal prices: equal capacities
        xi = activation_strategies(res)["max_flex"]()["up"]
        assert xi == pytest.approx(np.full(4, 1 / 2.0), abs=1e-3)

    def test_random_in_set_self_test(self, solved_case):
        _, res = solved_case
        rng = np.random.default_rng(10)
        draw = activation_strategies(res)["random_in_set"]
        for _ in range(2000):
            acts = draw(rng)
            for name, xi in acts.items():
                res.services[name].spec.admissible(xi)

    def test_down_service_direction(self, two_bus_net):
        from flexcap.case import ServiceConfig
        case = two_bus_case(
            two_bus_net, T=4,
            services=[ServiceConfig("dn", "down", prices=np.full(4, 5.0))])
        res = case.solve()
        xi = activation_strategies(res)["max_flex"]()["dn"]
        assert np.all(xi <= 0)


class TestCompareUncertaintySets:
    def test_identical_kinds_identical_rows(self, two_bus_net):
        case = two_bus_case(two_bus_net)
        rows = compare_uncertainty_sets(case, ["hyperbox", "hyperbox"],
                                        eps=0.1, seed=11)
        assert rows[0].objective == pytest.approx(rows[1].objective, rel=1e-9)
        assert rows[0].violation_rate == rows[1].violation_rate

    def test_smaller_coverage_never_hurts(self, two_bus_net):
        case = two_bus_case(two_bus_net, uset_kind=None)
        a = case.solve(uset=case.fit_uncertainty("hyperbox", 0.0))
        b = case.solve(uset=case.fit_uncertainty("hyperbox", 0.3))
        # the eps=0.3 box is contained in the eps=0 box
        assert b.objective >= a.objective - 1e-6 * abs(a.objective)

    def test_box_inside_ellipsoid_gives_more_capacity(self, two_bus_net):
        # corner-dwelling (skewed) deviations make the min/max box a strict
        # subset of the robust ellipsoid; containment is verified first
        case = two_bus_case(two_bus_net, uset_kind=None)
        d = case.scenarios.dimension
        scales = np.linspace(0.02, 0.05, d)
        corners_dev = np.array(np.meshgrid(*zip(-scales, scales))).T.reshape(-1, d)
        samples = case.scenarios.mean + corners_dev
        from flexcap.uncertainty import ScenarioSet
        case.scenarios = ScenarioSet(case.scenarios.drivers, case.T,
                                     np.vstack([samples, samples[:40]]),
                                     len(samples))
        box = case.fit_uncertainty("hyperbox", 0.0)
        ell = case.fit_uncertainty("robust", 0.0)
        corners = np.array(np.meshgrid(*zip(box.lower, box.upper))
                           ).T.reshape(-1, d)
        assert all(ell.contains(c) for c in corners)
        res_box = case.solve(uset=box)
        res_ell = case.solve(uset=ell)
        assert res_box.objective >= res_ell.objective - 1e-6

    def test_csv_output(self, two_bus_net, tmp_path):
        case = two_bus_case(two_bus_net)
        rows = compare_uncertainty_sets(
            case, ["hyperbox", "coverage", "robust", "gaussian"], eps=0.1,
            seed=13)
        comparison_to_csv(rows, tmp_path / "cmp.csv")
        lines = (tmp_path / "cmp.csv").read_text().strip().splitlines()
        assert len(lines) == 5
        assert lines[0].startswith("kind,")
