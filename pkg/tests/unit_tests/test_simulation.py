# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Unit tests for the Monte-Carlo harness and its summaries."""

import unittest

import numpy as np
import pytest

from darkpool.configuration import MFGConfig, SimConfig, build_spec
from darkpool.errors import InvalidInputError
from darkpool.mfg import mfg_fixed_point
from darkpool.simulation import (
    expected_inventory_path,
    impact_metric,
    path_record,
    simulate_competitive,
    simulate_regulated,
    summarize,
    summarize_metrics,
)
from darkpool.state import BsdeControls, ConstantFeeSchedule
from darkpool.trader import compensation_xi


class TestRegulatedMarket(unittest.TestCase):
    """Trader against constant fees in the two-pool market."""

    def setUp(self):
        """Table-one market, 200 paths on a coarse step."""
        spec = build_spec("table1")
        self.p = spec.market
        self.pools = spec.scenario_pools()
        self.cfg = SimConfig(n_paths=200, dt=0.01, seed=3)
        self.fees = ConstantFeeSchedule(c_l=0.01, c_d=0.005, n_pools=2, z=0.005, u=0.0)

    def test_same_seed_same_paths(self):
        """Runs are reproducible."""
        first = simulate_regulated(self.cfg, self.p, self.pools, self.fees)
        second = simulate_regulated(self.cfg, self.p, self.pools, self.fees)
        np.testing.assert_array_equal(first.terminal_price, second.terminal_price)
        np.testing.assert_array_equal(first.compensation, second.compensation)

    def test_inventory_is_conserved(self):
        """Q0 = q_T + lit volume + dark volume on every path."""
        metrics = simulate_regulated(self.cfg, self.p, self.pools, self.fees)
        executed = metrics.lit_volume + metrics.dark_volume.sum(axis=1)
        np.testing.assert_allclose(metrics.terminal_inventory + executed, self.p.Q0, atol=1e-10)
        self.assertTrue(np.all(metrics.terminal_inventory >= 0))
        np.testing.assert_allclose(metrics.initial_rate, -1.75)

    def test_recorded_path_rebuilds_impact_and_compensation(self):
        """A kept trajectory reproduces the path's impact and xi."""
        metrics = simulate_regulated(self.cfg, self.p, self.pools, self.fees, 0.1, n_trajectories=2)
        self.assertEqual(metrics.trajectories["ell"].shape, (2, 100, 2))
        for index in range(2):
            record = path_record(metrics, index, 0.01)
            self.assertAlmostEqual(
                impact_metric(record, self.p), metrics.permanent_impact[index], places=12
            )
            self.assertAlmostEqual(
                compensation_xi(record, 0.1, self.p, self.pools),
                metrics.compensation[index],
                places=10,
            )
        with self.assertRaises(InvalidInputError):
            path_record(metrics, 5, 0.01)

    def test_constant_contract_matches_the_schedule_exposures(self):
        """A contract with the schedule's own exposures reproduces the plain run."""
        plain = simulate_regulated(self.cfg, self.p, self.pools, self.fees, 0.1)
        fixed = simulate_regulated(self.cfg, self.p, self.pools, self.fees, self.fees.contract(0.1))
        np.testing.assert_array_equal(plain.compensation, fixed.compensation)
        np.testing.assert_array_equal(plain.permanent_impact, fixed.permanent_impact)
        shifted = simulate_regulated(
            self.cfg, self.p, self.pools, self.fees,
            BsdeControls(y0=0.1, z=0.02, u=np.zeros(2)), n_trajectories=2,
        )
        self.assertFalse(np.allclose(plain.compensation, shifted.compensation))
        np.testing.assert_array_equal(shifted.trajectories["z"], 0.02)
        with self.assertRaises(InvalidInputError):
            simulate_regulated(
                self.cfg, self.p, self.pools, self.fees, BsdeControls(y0=0.0, z=0.0, u=np.zeros(1))
            )

    def test_zero_fees_leave_only_the_impact_term(self):
        """Without fees the exchange earns kappa times the impact."""
        fees = ConstantFeeSchedule(c_l=0.0, c_d=0.0, n_pools=2)
        metrics = simulate_regulated(self.cfg, self.p, self.pools, fees)
        np.testing.assert_allclose(
            metrics.exchange_pnl, self.p.kappa * metrics.permanent_impact, atol=1e-12
        )

    def test_price_drift_under_each_measure(self):
        """Net of impact the price is a martingale; the reference price only feels epsilon."""
        cfg = SimConfig(n_paths=2000, dt=0.01, seed=5)
        controlled = simulate_regulated(cfg, self.p, self.pools, self.fees)
        noise = controlled.terminal_price - self.p.S0 - controlled.permanent_impact
        bound = 4 * self.p.sigma / np.sqrt(cfg.n_paths)
        self.assertLess(abs(noise.mean()), bound)

        reference = simulate_regulated(
            cfg.model_copy(update={"measure": "reference"}), self.p, self.pools, self.fees
        )
        drift = self.p.epsilon * self.p.lambda_rate * self.p.T
        self.assertLess(abs(reference.terminal_price.mean() - self.p.S0 - drift), bound)
        self.assertLess(controlled.terminal_price.mean(), reference.terminal_price.mean())

    def test_pool_count_must_match(self):
        """A one-pool schedule cannot drive a two-pool market."""
        fees = ConstantFeeSchedule(c_l=0.01, c_d=0.005, n_pools=1)
        with self.assertRaises(InvalidInputError):
            simulate_regulated(self.cfg, self.p, self.pools, fees)

    def test_strategy_table(self):
        """The expected path starts at Q0 with the closed-form rate and decreases."""
        table = expected_inventory_path("exponential", self.fees, self.p, self.pools, n_points=101)
        self.assertEqual(table["q"][0], 1.0)
        self.assertAlmostEqual(table["nu_hat"][0], -1.75)
        self.assertTrue(np.all(np.diff(table["q"]) <= 0))
        self.assertIn("ell_hat_2", table)
        self.assertIn("u_2", table)


class TestCompetitiveMarket(unittest.TestCase):
    """Major trader against the mean field."""

    @classmethod
    def setUpClass(cls):
        """Solve a small equilibrium once."""
        spec = build_spec("table2")
        cls.p = spec.market
        cls.pools = spec.scenario_pools()
        cls.equilibrium = mfg_fixed_point(MFGConfig(n_time=200, n_q=60), cls.p, cls.pools)

    def test_competitive_paths_have_no_compensation(self):
        """No contract: compensation is undefined and not summarised."""
        cfg = SimConfig(n_paths=100, seed=1, scenario="competitive")
        metrics = simulate_competitive(cfg, self.equilibrium, self.p, self.pools, 3)
        self.assertTrue(np.all(np.isnan(metrics.compensation)))
        stats = summarize_metrics(metrics)
        self.assertNotIn("compensation", stats)
        self.assertIn("dark_volume_1", stats)
        executed = metrics.lit_volume + metrics.dark_volume.sum(axis=1)
        np.testing.assert_allclose(metrics.terminal_inventory + executed, self.p.Q0, atol=1e-10)
        self.assertEqual(metrics.trajectories["q"].shape, (3, 200))

    def test_finitely_many_minors_widen_the_impact(self):
        """Sampled minor inventories add dispersion around the mean-field run."""
        limit = SimConfig(n_paths=2000, seed=4, scenario="competitive")
        finite = limit.model_copy(update={"n_minors": 4})
        base = simulate_competitive(limit, self.equilibrium, self.p, self.pools)
        sampled = simulate_competitive(finite, self.equilibrium, self.p, self.pools)
        again = simulate_competitive(finite, self.equilibrium, self.p, self.pools)
        np.testing.assert_array_equal(sampled.permanent_impact, again.permanent_impact)
        self.assertGreater(sampled.permanent_impact.std(), base.permanent_impact.std())
        bound = 4 * sampled.permanent_impact.std() / np.sqrt(limit.n_paths)
        self.assertLess(abs(sampled.permanent_impact.mean() - base.permanent_impact.mean()), bound)

    def test_pool_count_must_match(self):
        """The equilibrium was solved for one pool."""
        with self.assertRaises(InvalidInputError):
            simulate_competitive(SimConfig(n_paths=10), self.equilibrium, self.p, self.pools * 2)


class TestSummaries(unittest.TestCase):
    """Sample statistics."""

    def test_known_sample(self):
        """Quartiles use linear interpolation and std is the population value."""
        stats = summarize([1.0, 2.0, 3.0, 4.0], bins=4)
        self.assertEqual(stats.n, 4)
        self.assertAlmostEqual(stats.mean, 2.5)
        self.assertAlmostEqual(stats.median, 2.5)
        self.assertAlmostEqual(stats.std, np.sqrt(1.25))
        self.assertAlmostEqual(stats.q1, 1.75)
        self.assertAlmostEqual(stats.iqr, 1.5)
        self.assertEqual(int(stats.counts.sum()), 4)

    def test_mode_is_the_fullest_bin(self):
        """The histogram mode sits in the bin holding most of the sample."""
        stats = summarize([0.0] * 10 + [1.0, 2.0, 3.0], bins=3)
        self.assertAlmostEqual(stats.mode, 0.5)

    def test_constant_sample_has_its_value_as_mode(self):
        """A degenerate sample reports the common value, not a widened bin centre."""
        for values in ([0.3], [-0.0074] * 50):
            stats = summarize(values)
            self.assertEqual(stats.mode, values[0])
            self.assertEqual(stats.std, 0.0)
            self.assertTrue(stats.min <= stats.mode <= stats.max)

    def test_mode_stays_inside_the_sample(self):
        """Two tight clusters keep the mode between min and max."""
        stats = summarize([1.0, 1.0 + 1e-12, 1.0 + 2e-12], bins=2)
        self.assertTrue(stats.min <= stats.mode <= stats.max)


@pytest.mark.slow
def test_compensated_utility_is_a_martingale() -> None:
    overrides = {"market": {"rho": 10.0}, "sim": {"n_paths": 10_000, "dt": 0.001}}
    spec = build_spec("table1", overrides, scenario="regulated-M1", seed=0)
    p, pools = spec.market, spec.scenario_pools()
    fees = ConstantFeeSchedule(
        c_l=spec.sim.lit_fee, c_d=spec.sim.dark_fee, n_pools=len(pools), fee_cap=p.fee_cap
    )
    metrics = simulate_regulated(spec.sim, p, pools, fees, 0.0)
    q_T = metrics.terminal_inventory
    wealth = (
        metrics.compensation
        + metrics.terminal_cash
        + q_T * (metrics.terminal_price - p.alpha * q_T)
        - metrics.inventory_penalty
    )
    y_bar = p.X0 + p.Q0 * (p.S0 - p.alpha * p.Q0)
    utility = -np.exp(-p.rho * (wealth - y_bar))
    se = utility.std() / np.sqrt(utility.size)
    assert abs(utility.mean() + 1.0) < 3 * se


@pytest.mark.parametrize("values", [[], [1.0, np.nan], [np.inf]])
def test_summarize_rejects_bad_samples(values) -> None:
    with pytest.raises(InvalidInputError):
        summarize(values)


if __name__ == "__main__":
    unittest.main()
