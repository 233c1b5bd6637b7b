# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Unit tests for the Almgren-Chriss benchmark."""

import unittest

import numpy as np
import pytest

from darkpool.benchmark import ac_schedule, almgren_chriss_benchmark
from darkpool.configuration import MarketParams
from darkpool.errors import InvalidInputError


class TestSchedule(unittest.TestCase):
    """Deterministic liquidation schedule."""

    def setUp(self):
        """Default market, no running penalty."""
        self.p = MarketParams()
        self.t = np.linspace(0.0, 1.0, 1001)

    def test_linear_schedule_without_running_penalty(self):
        """phi = 0 sells at the constant rate -alpha Q0 / (eta + alpha T)."""
        q, nu = ac_schedule(self.p, self.t)
        np.testing.assert_allclose(nu, -2.0 / 3.0)
        self.assertAlmostEqual(q[-1], 1.0 / 3.0)

    def test_terminal_condition_with_running_penalty(self):
        """eta q'(T) + alpha q(T) = 0 and q(0) = Q0."""
        p = MarketParams(phi=0.5)
        q, nu = ac_schedule(p, self.t)
        self.assertAlmostEqual(q[0], 1.0)
        self.assertAlmostEqual(p.eta * nu[-1] + p.alpha * q[-1], 0.0, places=12)
        self.assertTrue(np.all(np.diff(q) < 0))

    def test_large_penalty_stays_finite(self):
        """Stiff schedules do not overflow."""
        q, nu = ac_schedule(MarketParams(phi=1e4), self.t)
        self.assertTrue(np.all(np.isfinite(q)) and np.all(np.isfinite(nu)))


class TestReservationUtility(unittest.TestCase):
    """Monte-Carlo and closed-form reservation utility."""

    def test_noiseless_market_matches_continuous_cash(self):
        """With sigma = 0 the wealth is deterministic."""
        p = MarketParams(sigma=0.0, rho=2.0)
        bench = almgren_chriss_benchmark(p, n_paths=10, dt=1e-3)
        c = 2.0 / 3.0
        drift = -p.gamma * c + p.epsilon * p.lambda_rate
        cash = c * (p.S0 + 0.5 * drift - p.eta * c)
        q_T = 1.0 / 3.0
        wealth = cash + q_T * (p.S0 + drift - p.alpha * q_T)
        self.assertAlmostEqual(bench.certainty_equivalent(p.rho), wealth, places=4)
        self.assertAlmostEqual(bench.R0, bench.R0_exact, places=12)
        self.assertAlmostEqual(bench.R0_se, 0.0, places=12)

    def test_monte_carlo_agrees_with_closed_form(self):
        """The estimate lies within a few standard errors of the Gaussian value."""
        p = MarketParams(rho=2.0)
        bench = almgren_chriss_benchmark(p, n_paths=20_000, seed=3)
        self.assertLess(abs(bench.R0 - bench.R0_exact), 4 * bench.R0_se + 1e-12)
        self.assertLess(bench.R0, 0.0)

    def test_high_risk_aversion_stays_in_log_space(self):
        """rho = 300 keeps R0 negative and its log finite."""
        bench = almgren_chriss_benchmark(MarketParams(), n_paths=1000, seed=1)
        self.assertTrue(np.isfinite(bench.log_neg_R0))
        self.assertLess(bench.R0, 0.0)

    def test_seed_reproducibility(self):
        """Same seed, same estimate."""
        p = MarketParams(rho=2.0)
        first = almgren_chriss_benchmark(p, n_paths=500, seed=11)
        second = almgren_chriss_benchmark(p, n_paths=500, seed=11)
        self.assertEqual(first.R0, second.R0)


def test_benchmark_needs_two_paths() -> None:
    with pytest.raises(InvalidInputError):
        almgren_chriss_benchmark(MarketParams(), n_paths=1)


if __name__ == "__main__":
    unittest.main()
