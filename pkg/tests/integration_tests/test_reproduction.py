# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Impact distributions of the shipped presets against the published market-quality targets.

Seed 0 and 5000 paths per scenario; each scenario runs under its preset's default fees.
"""

import unittest

import numpy as np
import pytest

from darkpool.configuration import build_spec
from darkpool.mfg import mfg_fixed_point
from darkpool.simulation import simulate_competitive, simulate_regulated, summarize
from darkpool.state import ConstantFeeSchedule

N_PATHS = 5000
BINS = 32
TOLERANCE = 0.3


def _regulated_impact(scenario):
    spec = build_spec("table1", {"sim": {"n_paths": N_PATHS}}, scenario=scenario, seed=0)
    pools = spec.scenario_pools()
    fees = ConstantFeeSchedule(
        c_l=spec.sim.lit_fee, c_d=spec.sim.dark_fee, n_pools=len(pools),
        fee_cap=spec.market.fee_cap,
    )
    return simulate_regulated(spec.sim, spec.market, pools, fees)


@pytest.mark.slow
class TestPresetReproduction(unittest.TestCase):
    """Regulated one- and two-pool markets against the competitive equilibrium."""

    @classmethod
    def setUpClass(cls):
        """Simulate the three scenarios once."""
        cls.m1 = _regulated_impact("regulated-M1")
        cls.m2 = _regulated_impact("regulated-M2")
        spec = build_spec("table2", {"sim": {"n_paths": N_PATHS}}, seed=0)
        pools = spec.scenario_pools()
        equilibrium = mfg_fixed_point(spec.mfg, spec.market, pools)
        cls.competitive = simulate_competitive(spec.sim, equilibrium, spec.market, pools)

    def test_one_pool_mode(self):
        """The single-pool impact histogram peaks near -0.007."""
        mode = summarize(self.m1.permanent_impact, BINS).mode
        self.assertLess(abs(mode + 0.007), TOLERANCE * 0.007)

    def test_second_pool_shifts_impact_right(self):
        """A second pool lowers the impact in the mean and in the mode."""
        one = summarize(self.m1.permanent_impact, BINS)
        two = summarize(self.m2.permanent_impact, BINS)
        self.assertGreater(two.mean, one.mean)
        self.assertGreater(two.mode, one.mode)

    def test_competitive_centre_and_width(self):
        """The competitive impact centres near -0.0074 and is wider than the one-pool market."""
        stats = summarize(self.competitive.permanent_impact, BINS)
        self.assertLess(abs(stats.mean + 0.0074), TOLERANCE * 0.0074)
        self.assertGreater(stats.std, summarize(self.m1.permanent_impact, BINS).std)
        self.assertGreater(float(np.mean(self.competitive.lit_volume)), 0.0)

    def test_every_path_conserves_inventory(self):
        """Q0 = q_T + lit + dark in all three scenarios."""
        for metrics in (self.m1, self.m2, self.competitive):
            executed = metrics.lit_volume + metrics.dark_volume.sum(axis=1)
            np.testing.assert_allclose(metrics.terminal_inventory + executed, 1.0, atol=1e-9)


if __name__ == "__main__":
    unittest.main()
