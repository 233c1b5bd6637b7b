# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Unit tests for the CSV tables and the run manifest."""

import unittest

import numpy as np
import pandas as pd
import yaml

from darkpool.configuration import build_spec
from darkpool.exports import (
    SUMMARY_COLUMNS,
    build_manifest,
    histogram_frame,
    residual_frame,
    strategy_frame,
    summary_frame,
    write_manifest,
    write_tables,
)
from darkpool.simulation import summarize


class TestFrames(unittest.TestCase):
    """Column layouts of the exported tables."""

    def test_strategy_columns_are_ordered(self):
        """t, q, nu_hat, the ell_hat_i, z, then the u_i."""
        n = 3
        table = {
            "u_2": np.zeros(n),
            "ell_hat_2": np.zeros(n),
            "z": np.zeros(n),
            "q": np.ones(n),
            "u_1": np.zeros(n),
            "t": np.arange(n),
            "ell_hat_1": np.zeros(n),
            "nu_hat": -np.ones(n),
        }
        frame = strategy_frame(table)
        self.assertEqual(
            list(frame.columns), ["t", "q", "nu_hat", "ell_hat_1", "ell_hat_2", "z", "u_1", "u_2"]
        )

    def test_summary_and_histogram(self):
        """One summary row per metric and one histogram row per bin."""
        stats = summarize(np.linspace(0.0, 1.0, 11), bins=5)
        frame = summary_frame({"impact": stats, "lit_volume": stats})
        self.assertEqual(list(frame.columns), SUMMARY_COLUMNS)
        self.assertEqual(list(frame["metric"]), ["impact", "lit_volume"])
        self.assertAlmostEqual(frame["mean"].iloc[0], 0.5)
        hist = histogram_frame(stats)
        self.assertEqual(len(hist), 5)
        self.assertEqual(int(hist["count"].sum()), 11)

    def test_residuals_are_numbered_from_one(self):
        """Iteration numbers start at 1."""
        frame = residual_frame([0.5, 0.1])
        self.assertEqual(list(frame["iteration"]), [1, 2])


def test_write_tables_skips_empty_frames(tmp_path) -> None:
    tables = {"b": pd.DataFrame({"x": [1.0, 2.0]}), "a": pd.DataFrame()}
    written = write_tables(tables, tmp_path / "out")
    assert written == ["b.csv"]
    assert not (tmp_path / "out" / "a.csv").exists()
    assert pd.read_csv(tmp_path / "out" / "b.csv")["x"].tolist() == [1.0, 2.0]


def test_manifest_is_stable_and_records_failures(tmp_path) -> None:
    spec = build_spec("table1", seed=7)
    first = build_manifest("simulate", spec, ["b.csv", "a.csv"], {"mean": np.float64(1.5)})
    second = build_manifest("simulate", spec, ["a.csv", "b.csv"], {"mean": np.float64(1.5)})
    assert first == second
    assert first["status"] == "ok"
    assert first["seed"] == 7
    assert first["artifacts"] == ["a.csv", "b.csv"]
    assert first["results"]["mean"] == 1.5
    assert not any("time" in key for key in first)

    other = build_manifest("simulate", build_spec("table1", seed=8), [])
    assert other["config_hash"] != first["config_hash"]

    failed = build_manifest("solve-mfg", None, [], error="ConvergenceError: no luck")
    assert failed["status"] == "failed"
    assert failed["error"].startswith("ConvergenceError")
    assert failed["config_hash"] is None

    path = write_manifest(first, tmp_path)
    assert path.name == "manifest.yaml"
    assert yaml.safe_load(path.read_text())["config_hash"] == first["config_hash"]


if __name__ == "__main__":
    unittest.main()
