# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Optimal liquidation with a lit venue and dark pools.

This package solves the trader's best responses, trains the exchange's fee schedule,
computes the competitive mean-field equilibrium and runs Monte-Carlo experiments.
"""

from darkpool.configuration import Configuration, ExperimentSpec, build_spec, load_config
from darkpool.graph import graph
from darkpool.state import State

__all__ = ["graph", "Configuration", "State", "ExperimentSpec", "build_spec", "load_config"]
