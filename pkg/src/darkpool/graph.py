# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Experiment pipeline built with LangGraph.

The graph loads and validates an experiment, dispatches to one solver according to the
subcommand, and always finishes in the export node, which writes the CSV tables and the
run manifest:

1. load: resolve and validate the experiment, prepare the output directory
2. solve_trader | solve_mfg | train_fees | simulate | benchmark_ac
3. export: tables and manifest, including the error of a failed step
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd
from langchain_core.runnables import RunnableConfig
from langgraph.graph import END, START, StateGraph

from darkpool.benchmark import almgren_chriss_benchmark
from darkpool.configuration import Configuration, ExperimentSpec
from darkpool.errors import ConfigurationError
from darkpool.exports import (
    build_manifest,
    density_frame,
    histogram_frame,
    major_frame,
    major_path_frame,
    minor_frame,
    paths_frame,
    residual_frame,
    strategy_frame,
    summary_frame,
    trajectories_frame,
    write_manifest,
    write_tables,
)
from darkpool.fee_designer import extract_fee_schedule, load_checkpoint, save_checkpoint, train
from darkpool.mfg import mfg_fixed_point
from darkpool.simulation import (
    expected_inventory_path,
    simulate_competitive,
    simulate_regulated,
    summarize_metrics,
)
from darkpool.state import ConstantFeeSchedule, FeeSchedule, State
from darkpool.trader import participation_y0
from darkpool.utils import derive_seed

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "solve-trader": "solve_trader",
    "solve-mfg": "solve_mfg",
    "train-fees": "train_fees",
    "simulate": "simulate",
    "benchmark-ac": "benchmark_ac",
}


def _failure(step: str, exc: Exception) -> Dict[str, Any]:
    logger.exception("Step %s failed: %s", step, exc)
    return {"error": f"{step}: {type(exc).__name__}: {exc}"}


def _constant_fees(spec: ExperimentSpec, zero: bool = False) -> ConstantFeeSchedule:
    sim, pools = spec.sim, spec.scenario_pools()
    return ConstantFeeSchedule(
        c_l=0.0 if zero else sim.lit_fee,
        c_d=0.0 if zero else sim.dark_fee,
        n_pools=len(pools),
        z=sim.z,
        u=sim.u,
        fee_cap=spec.market.fee_cap,
    )


def _fee_schedule(spec: ExperimentSpec, configuration: Configuration) -> FeeSchedule:
    source = spec.sim.fee_source
    if source == "actor":
        if not configuration.checkpoint_path:
            raise ConfigurationError("fee source 'actor' needs a checkpoint path")
        _, actor = load_checkpoint(configuration.checkpoint_path)
        if actor.n_pools != len(spec.scenario_pools()):
            raise ConfigurationError("checkpoint was trained for a different number of pools")
        return extract_fee_schedule(actor)
    return _constant_fees(spec, zero=source == "zero")


def load_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Validate the experiment and create the output directory."""
    try:
        if state.subcommand not in SUBCOMMANDS:
            raise ConfigurationError(
                f"unknown subcommand {state.subcommand!r}; expected one of {sorted(SUBCOMMANDS)}"
            )
        spec = state.spec
        if spec is None:
            raise ConfigurationError("no experiment given")
        if not isinstance(spec, ExperimentSpec):
            spec = ExperimentSpec.model_validate(spec)
        Path(spec.out_dir).mkdir(parents=True, exist_ok=True)
        logger.info(
            "Running %s: preset %s, scenario %s, seed %d",
            state.subcommand, spec.preset, spec.scenario, spec.seed,
        )
        return {"spec": spec}
    except Exception as exc:
        return _failure("load", exc)


def solve_trader_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Strategy tables of both trader models under the configured constant fees."""
    configuration = Configuration.from_runnable_config(config)
    spec = state.spec
    try:
        pools = spec.scenario_pools()
        fees = _constant_fees(spec)
        tables = dict(state.tables)
        results = dict(state.results)
        for utility in ("linear", "exponential"):
            table = expected_inventory_path(
                utility, fees, spec.market, pools, configuration.strategy_points
            )
            tables[f"strategy_{utility}"] = strategy_frame(table)
            results[f"initial_rate_{utility}"] = float(table["nu_hat"][0])
        return {"tables": tables, "results": results}
    except Exception as exc:
        return _failure("solve_trader", exc)


def _mfg_tables(result, configuration: Configuration) -> Dict[str, pd.DataFrame]:
    tables = {
        "mfg_minor": minor_frame(result),
        "mfg_major": major_frame(result),
        "mfg_major_path": major_path_frame(result),
        "mfg_residuals": residual_frame(result.residuals),
    }
    if configuration.write_density_snapshots:
        tables["mfg_density"] = density_frame(result)
    return tables


def solve_mfg_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Competitive equilibrium between the major and the minors."""
    configuration = Configuration.from_runnable_config(config)
    spec = state.spec
    try:
        result = mfg_fixed_point(spec.mfg, spec.market, spec.scenario_pools())
        results = dict(state.results)
        results.update(
            mfg_iterations=result.iterations,
            mfg_residual=result.residuals[-1],
            major_terminal_inventory=float(result.Q0bar[-1]),
        )
        tables = {**state.tables, **_mfg_tables(result, configuration)}
        return {"tables": tables, "results": results}
    except Exception as exc:
        return _failure("solve_mfg", exc)


def train_fees_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Train the fee designer and save its checkpoint."""
    configuration = Configuration.from_runnable_config(config)
    spec = state.spec
    try:
        outcome = train(spec, log_every=configuration.log_every)
        path = configuration.checkpoint_path or str(Path(spec.out_dir) / "checkpoint.pt")
        save_checkpoint(path, outcome.critic, outcome.actor, spec)
        results = dict(state.results)
        results.update(
            held_out_loss_start=outcome.held_out_start,
            held_out_loss_end=outcome.held_out_end,
            one_sided_differences=outcome.one_sided,
            checkpoint=str(path),
        )
        return {"tables": {**state.tables, "training_log": outcome.log}, "results": results}
    except Exception as exc:
        return _failure("train_fees", exc)


def _reservation_y0(spec: ExperimentSpec) -> Dict[str, float]:
    bench = almgren_chriss_benchmark(
        spec.market,
        n_paths=spec.sim.benchmark_paths,
        dt=spec.sim.dt,
        seed=derive_seed(spec.seed, "benchmark"),
    )
    return {
        "R0": bench.R0,
        "R0_se": bench.R0_se,
        "R0_exact": bench.R0_exact,
        "y0": participation_y0(bench.R0, spec.market),
    }


def simulate_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Monte-Carlo run of the configured scenario."""
    configuration = Configuration.from_runnable_config(config)
    spec = state.spec
    try:
        pools = spec.scenario_pools()
        results = dict(state.results)
        tables = dict(state.tables)
        if spec.scenario == "competitive":
            equilibrium = mfg_fixed_point(spec.mfg, spec.market, pools)
            metrics = simulate_competitive(
                spec.sim, equilibrium, spec.market, pools, configuration.n_trajectories
            )
            results["mfg_iterations"] = equilibrium.iterations
        else:
            if spec.sim.y0 is None:
                reservation = _reservation_y0(spec)
                results.update(reservation)
                y0 = reservation["y0"]
            else:
                y0 = spec.sim.y0
            fees = _fee_schedule(spec, configuration)
            metrics = simulate_regulated(
                spec.sim, spec.market, pools, fees, y0, configuration.n_trajectories
            )
        stats = summarize_metrics(metrics, configuration.histogram_bins)
        tables["paths"] = paths_frame(metrics)
        tables["summary"] = summary_frame(stats)
        tables["trajectories"] = trajectories_frame(metrics)
        for name, value in stats.items():
            tables[f"hist_{name}"] = histogram_frame(value)
        results.update(
            mean_impact=stats["impact"].mean,
            mode_impact=stats["impact"].mode,
            mean_initial_rate=float(metrics.initial_rate.mean()),
            clamp_events=int(metrics.clamp_events.sum()),
        )
        return {"tables": tables, "results": results}
    except Exception as exc:
        return _failure("simulate", exc)


def benchmark_ac_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Almgren-Chriss schedule with the reservation utility it implies."""
    spec = state.spec
    try:
        bench = almgren_chriss_benchmark(
            spec.market,
            n_paths=spec.sim.benchmark_paths,
            dt=spec.sim.dt,
            seed=derive_seed(spec.seed, "benchmark"),
        )
        schedule = pd.DataFrame({"t": bench.t, "q": bench.q, "nu": bench.nu})
        results = dict(state.results)
        results.update(
            R0=bench.R0,
            R0_se=bench.R0_se,
            R0_exact=bench.R0_exact,
            y0=participation_y0(bench.R0, spec.market),
        )
        return {"tables": {**state.tables, "ac_schedule": schedule}, "results": results}
    except Exception as exc:
        return _failure("benchmark_ac", exc)


def export_node(state: State, config: RunnableConfig) -> Dict[str, Any]:
    """Write every table and the manifest, also after a failure."""
    spec: Optional[ExperimentSpec] = state.spec if isinstance(state.spec, ExperimentSpec) else None
    out_dir = Path(spec.out_dir) if spec is not None else Path("runs/failed")
    artifacts = write_tables(state.tables, out_dir) if not state.error else []
    manifest = build_manifest(state.subcommand, spec, artifacts, state.results, state.error)
    write_manifest(manifest, out_dir)
    artifacts = artifacts + ["manifest.yaml"]
    logger.info("Wrote %d artifacts to %s", len(artifacts), out_dir)
    return {"artifacts": artifacts, "manifest": manifest}


def route(state: State) -> str:
    if state.error:
        return "export"
    return SUBCOMMANDS[state.subcommand]


workflow = StateGraph(State, config_schema=Configuration)

workflow.add_node("load", load_node)
workflow.add_node("solve_trader", solve_trader_node)
workflow.add_node("solve_mfg", solve_mfg_node)
workflow.add_node("train_fees", train_fees_node)
workflow.add_node("simulate", simulate_node)
workflow.add_node("benchmark_ac", benchmark_ac_node)
workflow.add_node("export", export_node)

workflow.add_edge(START, "load")
workflow.add_conditional_edges(
    "load",
    route,
    {
        "solve_trader": "solve_trader",
        "solve_mfg": "solve_mfg",
        "train_fees": "train_fees",
        "simulate": "simulate",
        "benchmark_ac": "benchmark_ac",
        "export": "export",
    },
)
for node in SUBCOMMANDS.values():
    workflow.add_edge(node, "export")
workflow.add_edge("export", END)

graph = workflow.compile()
graph.name = "Dark Pool Liquidation Experiments"
