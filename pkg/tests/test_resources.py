import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexcap import (
    BessSpec,
    HpSpec,
    PvSpec,
    bess_block,
    cycle_cost,
    fcr_energy_requirements,
    hp_block,
    pv_block,
)


def simulate_soe(spec: BessSpec, p: np.ndarray) -> np.ndarray:
    soe = np.empty(len(p) + 1)
    soe[0] = spec.initial_soe
    for t, pt in enumerate(p):
        soe[t + 1] = soe[t] - pt * spec.dt_hours
    return soe


class TestBessBlock:
    def test_single_step_rows(self):
        spec = BessSpec(bus=1, p_min=-2, p_max=1, q_min=0, q_max=0,
                        soe_min=0, soe_max=1, soe_0=1, dt_hours=1.0)
        block = bess_block(spec, 1)
        rows = dict(zip(block.labels, zip(block.W, block.z0)))
        w, z = rows["bess1:p_max[0]"]
        assert w[0] == 1 and z == 1
        w, z = rows["bess1:p_min[0]"]
        assert w[0] == -1 and z == 2
        # SOE after one step: 0 <= soe_0 - p*dt <= 1
        w, z = rows["bess1:soe_min[0]"]
        assert w[0] == 1.0 and z == pytest.approx(1.0)
        w, z = rows["bess1:soe_max[0]"]
        assert w[0] == -1.0 and z == pytest.approx(0.0)

    def test_infinite_power_bounds_leave_only_soe_rows(self):
        spec = BessSpec(bus=1, p_min=-np.inf, p_max=np.inf,
                        q_min=-np.inf, q_max=np.inf,
                        soe_min=0, soe_max=10, soe_0=5)
        block = bess_block(spec, 3)
        assert block.n_rows == 2 * 3
        assert all(k == "state" for k in block.kinds)

    def test_equivalence_with_recursion_oracle(self):
        # rows hold iff the exact SOE recursion stays within bounds
        rng = np.random.default_rng(0)
        spec = BessSpec(bus=1, p_min=-3, p_max=4, q_min=-1, q_max=1,
                        soe_min=1, soe_max=9, soe_0=4, dt_hours=0.5)
        for T in (1, 2, 5, 8):
            block = bess_block(spec, T)
            for _ in range(250):
                p = rng.uniform(-5, 5, T)
                q = rng.uniform(-2, 2, T)
                u = np.concatenate([p, q])
                soe = simulate_soe(spec, p)
                ok_sim = (
                    np.all(p >= spec.p_min) and np.all(p <= spec.p_max)
                    and np.all(q >= spec.q_min) and np.all(q <= spec.q_max)
                    and np.all(soe[1:] >= spec.soe_min)
                    and np.all(soe[1:] <= spec.soe_max)
                )
                margin = block.evaluate(u).min()
                if abs(margin) > 1e-9:
                    assert (margin >= 0) == ok_sim

    def test_midpoint_default_initial_soe(self):
        spec = BessSpec(bus=1, p_min=-1, p_max=1, q_min=0, q_max=0,
                        soe_min=2, soe_max=6)
        assert spec.initial_soe == 4

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            BessSpec(bus=1, p_min=0.5, p_max=1, q_min=0, q_max=0,
                     soe_min=0, soe_max=1)
        with pytest.raises(ValueError):
            BessSpec(bus=1, p_min=-1, p_max=1, q_min=0, q_max=0,
                     soe_min=0, soe_max=1, soe_0=2)


class TestHpBlock:
    def make_spec(self, **kw):
        base = dict(bus=2, p_min=0.0, p_max=10.0, m_bt=500.0, l_bt=0.5,
                    a_hp=3.0, q0_hp=0.2, h_demand=1.2, t_comfort=293.0,
                    t_min=310.0, t_max=350.0, t_0=330.0)
        base.update(kw)
        return HpSpec(**base)

    def test_zero_demand_reduces_to_cumulative_heat(self):
        T = 3
        spec = self.make_spec(t_inf0=np.full(T, 293.0), H=np.zeros((T, 0)))
        block = hp_block(spec, T)
        kappa = spec.kelvin_per_kwh()
        lab = dict(zip(block.labels, range(block.n_rows)))
        i = lab["hp2:t_max[2]"]
        # temperature row: -kappa*a*sum(p_inj) <= t_max - t0 - kappa*sum(q0 - l)
        assert block.W[i, :3] == pytest.approx(np.full(3, -kappa * spec.a_hp))
        drift = kappa * (spec.q0_hp - spec.l_bt) * 3
        assert block.z0[i] == pytest.approx(spec.t_max - spec.t_0 - drift)

    def test_hand_expanded_two_step_recursion(self):
        # oracle: expand T_bt^{t+1} - T_bt^t = dt/(4200 m) (Q_hp - Q_dem - l) by hand
        T = 2
        dt_hours = 0.5
        t_inf0 = np.array([283.0, 285.0])
        H = np.eye(2)
        spec = self.make_spec(t_inf0=t_inf0, H=H)
        block = hp_block(spec, T, dt_hours=dt_hours, n_zeta=2)
        kappa = 3.6e6 * dt_hours / (4200.0 * spec.m_bt)
        p_hp = np.array([4.0, 6.0])
        zeta = np.array([1.5, -2.0])
        temp = spec.t_0
        temps = []
        for t in range(T):
            q_hp = spec.a_hp * p_hp[t] + spec.q0_hp
            q_dem = spec.h_demand * (spec.t_comfort - (t_inf0[t] + zeta[t]))
            temp = temp + kappa * (q_hp - q_dem - spec.l_bt)
            temps.append(temp)
        u = np.concatenate([-p_hp, np.zeros(2)])  # injection = -consumption
        slack = block.evaluate(u, zeta)
        lab = dict(zip(block.labels, range(block.n_rows)))
        for t in range(T):
            assert slack[lab[f"hp2:t_max[{t}]"]] == pytest.approx(
                spec.t_max - temps[t], abs=1e-9)
            assert slack[lab[f"hp2:t_min[{t}]"]] == pytest.approx(
                temps[t] - spec.t_min, abs=1e-9)

    def test_vertex_shift_matches_simulation(self):
        T = 4
        rng = np.random.default_rng(1)
        H = np.zeros((T, T))
        H[:, :] = np.eye(T)
        spec = self.make_spec(t_inf0=np.full(T, 280.0), H=H)
        block = hp_block(spec, T, n_zeta=T)
        zeta = rng.uniform(-3, 3, T)
        # affine in zeta: doubling doubles the RHS shift exactly
        shift1 = block.Mz @ zeta
        shift2 = block.Mz @ (2 * zeta)
        assert shift2 == pytest.approx(2 * shift1)

    def test_power_box_rows(self):
        spec = self.make_spec(p_min=1.0, p_max=8.0)
        block = hp_block(spec, 2)
        u = np.concatenate([[-0.5, -9.0], [0, 0]])  # consumption 0.5 and 9.0
        slack = block.evaluate(u)
        lab = dict(zip(block.labels, range(block.n_rows)))
        assert slack[lab["hp2:p_min[0]"]] < 0      # below minimum consumption
        assert slack[lab["hp2:p_max[1]"]] < 0      # above maximum


class TestPvBlock:
    def test_night_profile_forces_zero(self):
        spec = PvSpec(bus=3, mpp0=np.zeros(3))
        block = pv_block(spec, 3)
        u = np.zeros(6)
        assert block.evaluate(u).min() == pytest.approx(0.0)
        u[1] = 0.5
        assert block.evaluate(u).min() < 0

    def test_affine_shift_at_vertex(self):
        spec = PvSpec(bus=3, mpp0=np.array([100.0]), M_pv=np.array([[1.0]]))
        block = pv_block(spec, 1, n_zeta=1)
        lab = dict(zip(block.labels, range(block.n_rows)))
        i = lab["pv3:mpp[0]"]
        zeta = np.array([-20.0])
        rhs = block.z0[i] + block.Mz[i] @ zeta
        assert rhs == pytest.approx(80.0)

    def test_random_feasibility_matches_direct_bounds(self):
        rng = np.random.default_rng(2)
        T = 3
        M = rng.standard_normal((T, 2))
        spec = PvSpec(bus=3, mpp0=np.array([50.0, 80.0, 10.0]), M_pv=M)
        block = pv_block(spec, T, n_zeta=2)
        for _ in range(300):
            zeta = rng.uniform(-5, 5, 2)
            p = rng.uniform(-10, 100, T)
            u = np.concatenate([p, np.zeros(T)])
            mpp = spec.mpp0 + M @ zeta
            ok = np.all(p >= 0) and np.all(p <= mpp)
            margin = block.evaluate(u, zeta).min()
            if abs(margin) > 1e-9:
                assert (margin >= 0) == ok

    def test_non_curtailable_pins_baseload(self):
        spec = PvSpec(bus=3, mpp0=np.array([10.0, 20.0]), curtailable=False)
        block = pv_block(spec, 2)
        assert set(block.pin_baseload) == {0, 1}
        assert block.pin_baseload[1][0] == 20.0


class TestFcrEnergy:
    def test_constant_full_deviation(self):
        t = np.arange(0, 4 * 3600, 10.0)
        f = np.full_like(t, 50.0 + 0.2)
        stats = fcr_energy_requirements(t, f, 4.0)
        assert stats.bias == pytest.approx([1.0])
        assert stats.throughput == pytest.approx([1.0])

    def test_zero_deviation(self):
        t = np.arange(0, 4 * 3600, 10.0)
        stats = fcr_energy_requirements(t, np.full_like(t, 50.0), 4.0)
        assert stats.bias == pytest.approx([0.0])
        assert stats.throughput == pytest.approx([0.0])

    def test_square_wave_analytic(self):
        # +-200 mHz at 50% duty: droop response integrates to zero net energy
        # while the absolute throughput stays at full activation
        dt = 10.0
        t = np.arange(0, 8 * 3600, dt)
        f = np.where((t // 1800) % 2 == 0, 50.2, 49.8)
        stats = fcr_energy_requirements(t, f, 4.0)
        assert stats.bias == pytest.approx([0.0, 0.0], abs=1e-12)
        assert stats.throughput == pytest.approx([1.0, 1.0])

    def test_saturation(self):
        t = np.arange(0, 4 * 3600, 10.0)
        stats = fcr_energy_requirements(t, np.full_like(t, 51.0), 4.0)
        assert stats.throughput == pytest.approx([1.0])

    def test_gap_rejected(self):
        t = np.array([0.0, 10.0, 30.0, 40.0])
        with pytest.raises(ValueError, match="uniform"):
            fcr_energy_requirements(t, np.full_like(t, 50.0), 4.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fcr_energy_requirements(np.array([]), np.array([]), 4.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_bias_never_exceeds_throughput(self, seed):
        rng = np.random.default_rng(seed)
        t = np.arange(0, 8 * 3600, 60.0)
        f = 50.0 + 0.1 * rng.standard_normal(t.size)
        stats = fcr_energy_requirements(t, f, 4.0)
        assert np.all(stats.bias <= stats.throughput + 1e-12)


class TestCycleCost:
    @pytest.mark.parametrize("c_inv,n,expected", [
        (300000.0, 6000.0, 50.0),
        (0.0, 6000.0, 0.0),
        (1e6, 4000.0, 250.0),
    ])
    def test_quotient(self, c_inv, n, expected):
        assert cycle_cost(c_inv, n) == expected

    def test_invalid_cycles(self):
        with pytest.raises(ValueError):
            cycle_cost(1.0, 0.0)


class TestAffineInZeta:
    def test_blocks_double_with_zeta(self):
        T = 3
        H = np.eye(T)
        spec = HpSpec(bus=2, p_min=0, p_max=10, m_bt=400, l_bt=0.1, a_hp=3,
                      q0_hp=0, h_demand=1.0, t_comfort=293, t_min=300,
                      t_max=360, t_0=330, t_inf0=np.full(T, 280.0), H=H)
        block = hp_block(spec, T, n_zeta=T)
        zeta = np.array([1.0, -2.0, 0.5])
        assert block.Mz @ (2 * zeta) == pytest.approx(2 * (block.Mz @ zeta))
