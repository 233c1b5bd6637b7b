# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Unit tests for the competitive-market solver."""

import unittest

import numpy as np
import pytest
from scipy import integrate, stats

from darkpool.configuration import DarkPoolSpec, MarketParams, MFGConfig
from darkpool.errors import ConvergenceError, InvalidInputError, NumericalError
from darkpool.mfg import (
    Grid,
    fp_pushforward,
    initial_density,
    initial_law,
    major_dark_alloc,
    major_mean_inventory,
    mfg_fixed_point,
    pushforward_density,
    recover_h1_h0,
    riccati_h2,
    sample_initial_means,
    solve_major_hjb,
    solve_minor,
    solve_minor_bvp,
)


def _constant_forcing_oracle(t, p, E0, rate):
    """Exact E for 2 eta E'' + gamma E' = -gamma0 rate with the Robin end condition."""
    k = p.gamma / (2.0 * p.eta)
    a = -p.major_gamma * rate / p.gamma
    T, r = p.T, p.alpha / p.eta
    decay = np.exp(-k * T)
    # unknowns C1, C2 of E = C1 + C2 exp(-k t) + a t
    system = np.array([[1.0, 1.0], [r, decay * (r - k)]])
    rhs = np.array([E0, -a - r * a * T])
    c1, c2 = np.linalg.solve(system, rhs)
    E = c1 + c2 * np.exp(-k * t) + a * t
    mu = -k * c2 * np.exp(-k * t) + a
    return E, mu


class TestMinorPlayers(unittest.TestCase):
    """Riccati coefficient, mean-inventory BVP and transported density."""

    def setUp(self):
        """Competitive preset constants."""
        self.p = MarketParams(gamma0=0.01, eta0=0.02, alpha0=0.04)
        self.t = np.linspace(0.0, 1.0, 1001)

    def test_riccati_values(self):
        """h2(0) = -alpha eta / (eta + alpha T) and h2(T) = -alpha."""
        self.assertAlmostEqual(riccati_h2(0.0, 0.04, 0.02, 1.0), -0.0008 / 0.06)
        self.assertAlmostEqual(riccati_h2(1.0, 0.04, 0.02, 1.0), -0.04)

    def test_riccati_solves_its_ode(self):
        """h2 matches a high-order integration of h2' + h2^2 / eta = 0 from h2(T) = -alpha."""
        t = np.linspace(0.0, 1.0, 1000)
        solution = integrate.solve_ivp(
            lambda _, h: -(h**2) / 0.02, (1.0, 0.0), [-0.04], method="DOP853",
            t_eval=t[::-1], rtol=1e-10, atol=1e-12,
        )
        self.assertTrue(solution.success)
        np.testing.assert_allclose(
            riccati_h2(t, 0.04, 0.02, 1.0), solution.y[0][::-1], rtol=0.0, atol=1e-8
        )

    def test_riccati_outside_horizon(self):
        """Times beyond T are rejected."""
        with self.assertRaises(InvalidInputError):
            riccati_h2(1.5, 0.04, 0.02, 1.0)

    def test_bvp_without_forcing_or_inventory(self):
        """nu0 = 0 and E0 = 0 give E = mu = 0."""
        E, mu = solve_minor_bvp(np.zeros_like(self.t), self.t, self.p, 0.0)
        np.testing.assert_allclose(E, 0.0, atol=1e-14)
        np.testing.assert_allclose(mu, 0.0, atol=1e-12)

    def test_bvp_with_constant_forcing(self):
        """A constant major rate has an exponential-plus-linear solution."""
        rate = -0.5
        E, mu = solve_minor_bvp(np.full_like(self.t, rate), self.t, self.p, 0.1)
        E_exact, mu_exact = _constant_forcing_oracle(self.t, self.p, 0.1, rate)
        np.testing.assert_allclose(E, E_exact, atol=1e-6)
        np.testing.assert_allclose(mu, mu_exact, atol=1e-5)
        self.assertAlmostEqual(mu[-1] + self.p.alpha / self.p.eta * E[-1], 0.0, places=12)

    def test_bvp_rejects_bad_rate_path(self):
        """Non-finite or mis-sampled rates are invalid."""
        with self.assertRaises(InvalidInputError):
            solve_minor_bvp(np.zeros(10), self.t, self.p, 0.1)
        bad = np.zeros_like(self.t)
        bad[3] = np.nan
        with self.assertRaises(InvalidInputError):
            solve_minor_bvp(bad, self.t, self.p, 0.1)

    def test_h0_vanishes_at_maturity(self):
        """h0(T) = 0 and h0 decreases in time."""
        E, mu = solve_minor_bvp(np.full_like(self.t, -0.5), self.t, self.p, 0.1)
        h2 = riccati_h2(self.t, self.p.alpha, self.p.eta, self.p.T)
        h1, h0 = recover_h1_h0(E, mu, h2, self.t, self.p)
        self.assertEqual(h0[-1], 0.0)
        self.assertTrue(np.all(np.diff(h0) <= 1e-15))
        np.testing.assert_allclose(h1, 2 * self.p.eta * mu - 2 * h2 * E)

    def test_flow_contracts_to_a_third(self):
        """Without drift, Phi(T) = eta / (eta + alpha T) = 1/3."""
        q = np.linspace(0.0, 1.2, 121)
        B = riccati_h2(self.t, 0.04, 0.02, 1.0) / 0.02
        m0 = initial_density(q, 0.5, 0.05)
        Phi, psi, _, _, _ = fp_pushforward(self.t, np.zeros_like(self.t), B, q, m0)
        self.assertAlmostEqual(Phi[-1], 1.0 / 3.0, places=6)
        np.testing.assert_allclose(psi, 0.0, atol=1e-15)

    def test_initial_density_mean_and_mass(self):
        """The discrete density has unit mass and the requested mean."""
        q = np.linspace(0.0, 1.2, 121)
        m0 = initial_density(q, 0.1, 0.05)
        dq = q[1] - q[0]
        self.assertAlmostEqual(m0.sum() * dq, 1.0, places=12)
        self.assertAlmostEqual(np.sum(q * m0) * dq, 0.1, places=10)
        with self.assertRaises(InvalidInputError):
            initial_density(q, 2.0, 0.05)

    def test_initial_law_behind_the_density(self):
        """The truncated normal lives on the grid range and is proportional to the grid density."""
        q = np.linspace(0.0, 1.2, 121)
        law = initial_law(q, 0.1, 0.05)
        lower, upper = law.support()
        self.assertAlmostEqual(lower, 0.0, places=12)
        self.assertAlmostEqual(upper, 1.2, places=12)
        ratio = law.pdf(q[1:-1]) / initial_density(q, 0.1, 0.05)[1:-1]
        np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)
        self.assertAlmostEqual(law.mean(), 0.1, delta=2e-3)
        with self.assertRaises(InvalidInputError):
            initial_law(q, 0.0, 0.05)

    def test_sampled_minor_means(self):
        """Averages of n draws from m0 are centred on its mean with std shrunk by sqrt(n)."""
        q = np.linspace(0.0, 1.2, 121)
        law = initial_law(q, 0.1, 0.05)
        means = sample_initial_means(q, 0.1, 0.05, 4, 20000, np.random.default_rng(8))
        self.assertEqual(means.shape, (20000,))
        self.assertTrue(np.all(means >= 0.0))
        self.assertLess(abs(means.mean() - law.mean()), 4 * law.std() / np.sqrt(4 * 20000))
        self.assertAlmostEqual(means.std() / (law.std() / 2.0), 1.0, delta=0.05)
        edge = sample_initial_means(q, 0.0, 0.05, 4, 5, np.random.default_rng(8))
        np.testing.assert_array_equal(edge, np.zeros(5))
        with self.assertRaises(InvalidInputError):
            sample_initial_means(q, 0.1, 0.05, 0, 5, np.random.default_rng(8))

    def test_snapshots_conserve_mass_and_track_the_mean(self):
        """Every snapshot integrates to one and its mean follows E."""
        config = MFGConfig(n_time=200, n_q=120, E0=0.5)
        grid = Grid.from_config(config, self.p.T)
        minor = solve_minor(np.full_like(grid.t, -0.6), grid, self.p, config)
        dq = grid.dq
        for ts, m in zip(minor.snapshot_t, minor.m):
            self.assertAlmostEqual(m.sum() * dq, 1.0, places=10)
            self.assertAlmostEqual(
                np.sum(grid.q * m) * dq, float(np.interp(ts, grid.t, minor.E)), delta=1e-4
            )

    def test_closed_form_pushforward(self):
        """The transported normal density keeps unit mass."""
        q = np.linspace(-2.0, 3.0, 5001)
        m = pushforward_density(stats.norm(0.5, 0.1).pdf, 0.4, 0.05, q)
        self.assertAlmostEqual(integrate.trapezoid(m, q), 1.0, places=6)
        with self.assertRaises(InvalidInputError):
            pushforward_density(stats.norm(0.5, 0.1).pdf, 0.0, 0.0, q)


class TestMajorPlayer(unittest.TestCase):
    """Dark allocation with a threshold, HJB sweep and mean inventory."""

    def setUp(self):
        """Inventory grid on [0, 1.2]."""
        self.q = np.linspace(0.0, 1.2, 121)
        self.dq = self.q[1] - self.q[0]
        self.pool = DarkPoolSpec(theta=30.0, size_mean=0.5)

    def _marginal(self, h):
        d = np.empty_like(h)
        d[1:] = np.diff(h) / self.dq
        d[0] = d[1]
        return d

    def test_decreasing_value_posts_everything(self):
        """With h = -alpha q^2 the threshold is zero and ell = q."""
        marginal = self._marginal(-0.04 * self.q**2)
        ell, b = major_dark_alloc(self.q, marginal, self.q, [self.pool])
        self.assertEqual(b, 0.0)
        np.testing.assert_allclose(ell[:, 0], self.q)

    def test_threshold_of_concave_value(self):
        """h = -(q - 0.5)^2 keeps the inventory at 0.5 out of the pools."""
        marginal = self._marginal(-((self.q - 0.5) ** 2))
        ell, b = major_dark_alloc(self.q, marginal, self.q, [self.pool])
        self.assertAlmostEqual(b, 0.5, places=10)
        np.testing.assert_allclose(ell[:, 0], np.maximum(self.q - 0.5, 0.0), atol=1e-10)

    def test_symmetric_pools_share_the_budget(self):
        """Identical pools receive half of (q - b)^+ each."""
        marginal = self._marginal(-0.04 * self.q**2)
        ell, _ = major_dark_alloc(self.q, marginal, self.q, [self.pool, self.pool])
        np.testing.assert_allclose(ell[:, 0], ell[:, 1], atol=1e-9)
        np.testing.assert_allclose(ell.sum(axis=1), self.q, atol=1e-12)

    def test_three_pools_spend_the_budget(self):
        """The nested bisection allocates exactly (q - b)^+."""
        pools = [
            self.pool,
            DarkPoolSpec(theta=20.0, size_mean=0.3),
            DarkPoolSpec(theta=10.0, size_mean=0.8),
        ]
        marginal = self._marginal(-0.04 * self.q**2)
        ell, _ = major_dark_alloc(self.q, marginal, self.q, pools)
        np.testing.assert_allclose(ell.sum(axis=1), self.q, atol=1e-10)
        self.assertTrue(np.all(ell >= 0))

    def test_non_monotone_marginal(self):
        """A rising marginal raises in strict mode only."""
        marginal = self._marginal(self.q**3)
        with self.assertRaises(NumericalError):
            major_dark_alloc(self.q, marginal, self.q, [self.pool])
        ell, _ = major_dark_alloc(self.q, marginal, self.q, [self.pool], strict=False)
        self.assertEqual(ell.shape, (self.q.shape[0], 1))

    def test_lit_only_value_is_quadratic(self):
        """No pools, mu = 0 and gamma0 = 0: h = H(t) q^2 with the Riccati H."""
        p = MarketParams(gamma0=0.0)
        config = MFGConfig(n_time=400, n_q=120)
        grid = Grid.from_config(config, p.T)
        major = solve_major_hjb(np.zeros_like(grid.t), p, [], grid)
        H0 = riccati_h2(0.0, p.alpha, p.eta, p.T)
        np.testing.assert_allclose(major.h0_grid[0], H0 * grid.q**2, atol=2e-3)
        np.testing.assert_allclose(major.nu0[0], H0 * grid.q / p.eta, atol=0.03)
        self.assertEqual(major.ell0.shape, (401, 121, 0))

    def test_jump_stability_check(self):
        """A coarse time grid with fast arrivals is rejected."""
        grid = Grid.from_config(MFGConfig(n_time=10, n_q=60), 1.0)
        with self.assertRaises(NumericalError):
            solve_major_hjb(np.zeros_like(grid.t), MarketParams(), [self.pool], grid)

    def test_cfl_check(self):
        """A fine inventory grid with a coarse time grid violates the CFL bound."""
        grid = Grid.from_config(MFGConfig(n_time=20, n_q=400), 1.0)
        with self.assertRaises(NumericalError):
            solve_major_hjb(np.zeros_like(grid.t), MarketParams(), [], grid)

    def test_mean_inventory_decreases(self):
        """The major sells down from Q0."""
        p = MarketParams()
        grid = Grid.from_config(MFGConfig(n_time=200, n_q=60), p.T)
        major = solve_major_hjb(np.zeros_like(grid.t), p, [self.pool], grid)
        Q, rate = major_mean_inventory(major, p, [self.pool])
        self.assertEqual(Q[0], 1.0)
        self.assertTrue(np.all(np.diff(Q) <= 1e-12))
        self.assertTrue(np.all(rate <= 0))


class TestFixedPoint(unittest.TestCase):
    """Relaxed fixed-point iteration."""

    def setUp(self):
        """Small grids."""
        self.config = MFGConfig(n_time=200, n_q=60, tol=1e-8, max_iters=100)
        self.pool = DarkPoolSpec(theta=30.0, size_mean=200.0)

    def test_without_major_impact_the_minor_response_is_fixed(self):
        """With gamma0 = 0 the rate path does not move the minors."""
        p = MarketParams(gamma0=0.0)
        result = mfg_fixed_point(self.config, p, [self.pool])
        grid = Grid.from_config(self.config, p.T)
        _, mu = solve_minor_bvp(np.zeros_like(grid.t), grid.t, p, self.config.E0)
        np.testing.assert_allclose(result.minor.mu, mu, atol=1e-12)
        self.assertLess(result.residuals[-1], self.config.tol)

    def test_no_minor_inventory_converges_immediately(self):
        """gamma0 = 0 and E0 = 0 leave mu at zero."""
        config = self.config.model_copy(update={"E0": 0.0})
        result = mfg_fixed_point(config, MarketParams(gamma0=0.0), [self.pool])
        self.assertEqual(result.iterations, 1)

    def test_coupled_equilibrium_converges(self):
        """The relaxed iteration reaches the tolerance with major impact."""
        result = mfg_fixed_point(self.config, MarketParams(gamma0=0.01), [self.pool])
        self.assertLess(result.residuals[-1], self.config.tol)
        self.assertLess(result.Q0bar[-1], 1.0)
        self.assertEqual(result.nu0_path.shape, (201,))

    def test_distinct_starts_reach_one_equilibrium(self):
        """Two initial rate guesses converge to the same mu, with mu = E' and the Robin end."""
        p = MarketParams(gamma0=0.01)
        grid = Grid.from_config(self.config, p.T)
        first = mfg_fixed_point(self.config, p, [self.pool])
        second = mfg_fixed_point(
            self.config, p, [self.pool], mu_init=np.full(grid.t.shape, -0.3)
        )
        np.testing.assert_allclose(first.minor.mu, second.minor.mu, atol=1e-5)
        np.testing.assert_allclose(first.Q0bar, second.Q0bar, atol=1e-5)

        E, mu, dt = first.minor.E, first.minor.mu, grid.dt
        np.testing.assert_allclose(mu, np.gradient(E, grid.t), atol=10 * dt)
        slope_end = (3.0 * E[-1] - 4.0 * E[-2] + E[-3]) / (2.0 * dt)
        self.assertLess(abs(slope_end + p.alpha / p.eta * E[-1]), 10 * dt)
        for m in first.minor.m:
            self.assertAlmostEqual(m.sum() * grid.dq, 1.0, delta=1e-6)

    def test_iteration_cap(self):
        """Stopping early raises with the last residual."""
        config = self.config.model_copy(update={"max_iters": 1})
        with self.assertRaises(ConvergenceError) as ctx:
            mfg_fixed_point(config, MarketParams(gamma0=0.01), [self.pool])
        self.assertEqual(ctx.exception.iterations, 1)

    def test_grid_must_cover_initial_inventory(self):
        """q_max below Q0 is rejected."""
        config = self.config.model_copy(update={"q_max": 0.5})
        with self.assertRaises(InvalidInputError):
            mfg_fixed_point(config, MarketParams(), [self.pool])


@pytest.mark.slow
def test_competitive_preset_converges() -> None:
    from darkpool.configuration import build_spec

    spec = build_spec("table2")
    result = mfg_fixed_point(spec.mfg, spec.market, spec.scenario_pools())
    assert result.residuals[-1] < spec.mfg.tol
    assert result.Q0bar[-1] < spec.market.Q0
    assert result.minor.m.shape == (5, spec.mfg.n_q + 1)


if __name__ == "__main__":
    unittest.main()
