# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Tabular exports and the run manifest."""

from __future__ import annotations

import logging
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
import pandas as pd
import yaml

from darkpool.configuration import ExperimentSpec
from darkpool.simulation import SummaryStats
from darkpool.state import MFGResult, PathMetrics
from darkpool.utils import config_hash

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ("numpy", "scipy", "pandas", "torch", "pydantic", "langgraph")
SUMMARY_COLUMNS = ["metric", "n", "mean", "std", "median", "q1", "q3", "iqr", "mode", "min", "max"]


def strategy_frame(table: Mapping[str, np.ndarray]) -> pd.DataFrame:
    """Strategy table with columns t, q, nu_hat, ell_hat_i, z, u_i."""
    ordered = ["t", "q", "nu_hat"]
    ordered += sorted(k for k in table if k.startswith("ell_hat_"))
    ordered += ["z"] + sorted(k for k in table if k.startswith("u_"))
    return pd.DataFrame({key: table[key] for key in ordered})


def minor_frame(result: MFGResult) -> pd.DataFrame:
    minor = result.minor
    return pd.DataFrame(
        {"t": minor.t, "h0": minor.h0, "h1": minor.h1, "h2": minor.h2, "E": minor.E, "mu": minor.mu}
    )


def major_frame(result: MFGResult) -> pd.DataFrame:
    """Major value grid in long format: one row per (t, q) node."""
    major = result.major
    n_t, n_q = major.h0_grid.shape
    frame = pd.DataFrame(
        {
            "t": np.repeat(major.t, n_q),
            "q": np.tile(major.q_grid, n_t),
            "h0_grid": major.h0_grid.ravel(),
            "nu0": major.nu0.ravel(),
        }
    )
    for i in range(major.ell0.shape[2]):
        frame[f"ell0_{i + 1}"] = major.ell0[:, :, i].ravel()
    return frame


def major_path_frame(result: MFGResult) -> pd.DataFrame:
    return pd.DataFrame(
        {"t": result.major.t, "Q0bar": result.Q0bar, "nu0": result.nu0_path, "b": result.major.b}
    )


def density_frame(result: MFGResult) -> pd.DataFrame:
    """Density snapshots in long format (t, q, m)."""
    minor = result.minor
    k, n_q = minor.m.shape
    return pd.DataFrame(
        {
            "t": np.repeat(minor.snapshot_t, n_q),
            "q": np.tile(minor.q_grid, k),
            "m": minor.m.ravel(),
        }
    )


def residual_frame(residuals: List[float]) -> pd.DataFrame:
    return pd.DataFrame({"iteration": np.arange(1, len(residuals) + 1), "residual": residuals})


def paths_frame(metrics: PathMetrics) -> pd.DataFrame:
    """One row per simulated path."""
    frame = pd.DataFrame(
        {
            "path": np.arange(metrics.n_paths),
            "impact": metrics.permanent_impact,
            "terminal_inventory": metrics.terminal_inventory,
            "lit_volume": metrics.lit_volume,
            "compensation": metrics.compensation,
            "exchange_pnl": metrics.exchange_pnl,
            "exchange_objective": metrics.exchange_objective,
            "terminal_cash": metrics.terminal_cash,
            "terminal_price": metrics.terminal_price,
            "inventory_penalty": metrics.inventory_penalty,
            "clamp_events": metrics.clamp_events,
            "initial_rate": metrics.initial_rate,
        }
    )
    for i in range(metrics.dark_volume.shape[1]):
        frame[f"dark_volume_{i + 1}"] = metrics.dark_volume[:, i]
    return frame


def trajectories_frame(metrics: PathMetrics) -> pd.DataFrame:
    """Recorded trajectories in long format: one row per (path, step)."""
    traj = metrics.trajectories
    if not traj:
        return pd.DataFrame()
    k, n_steps = traj["q"].shape
    frame = pd.DataFrame({"path": np.repeat(np.arange(k), n_steps)})
    for name, values in traj.items():
        if values.ndim == 3:
            for i in range(values.shape[2]):
                frame[f"{name}_{i + 1}"] = values[:, :, i].ravel()
        else:
            frame[name] = values.ravel()
    return frame


def summary_frame(stats: Mapping[str, SummaryStats]) -> pd.DataFrame:
    rows = [
        {column: getattr(value, column) for column in SUMMARY_COLUMNS[1:]} | {"metric": name}
        for name, value in stats.items()
    ]
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def histogram_frame(stats: SummaryStats) -> pd.DataFrame:
    return pd.DataFrame(
        {"bin_left": stats.edges[:-1], "bin_right": stats.edges[1:], "count": stats.counts}
    )


def write_tables(tables: Mapping[str, pd.DataFrame], out_dir: Path) -> List[str]:
    """Write each table to ``<out_dir>/<name>.csv`` and return the written file names."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(tables):
        frame = tables[name]
        if frame is None or frame.empty:
            continue
        path = out_dir / f"{name}.csv"
        frame.to_csv(path, index=False, float_format="%.10g")
        written.append(path.name)
        logger.debug("Wrote %s (%d rows)", path, len(frame))
    return written


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def build_manifest(
    subcommand: str,
    spec: Optional[ExperimentSpec],
    artifacts: List[str],
    results: Optional[Dict[str, Any]] = None,
    error: Optional[str] = None,
) -> Dict[str, Any]:
    """Run manifest: resolved spec, its hash, seed, versions and artifacts; no timestamps."""
    resolved = spec.model_dump(mode="json") if spec is not None else None
    manifest: Dict[str, Any] = {
        "subcommand": subcommand,
        "config_hash": config_hash(resolved) if resolved is not None else None,
        "seed": spec.seed if spec is not None else None,
        "versions": package_versions(),
        "artifacts": sorted(artifacts),
        "spec": resolved,
        "status": "failed" if error else "ok",
    }
    if results:
        manifest["results"] = {key: _plain(value) for key, value in sorted(results.items())}
    if error:
        manifest["error"] = error
    return manifest


def _plain(value: Any) -> Any:
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def write_manifest(manifest: Dict[str, Any], out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=True, default_flow_style=False))
    return path
