# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Monte-Carlo harness for the regulated and competitive markets.

All paths advance together; each step draws one Brownian increment per path and at most
one arrival per pool and path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, Sequence, Union

import numpy as np

from darkpool.configuration import DarkPoolSpec, MarketParams, SimConfig
from darkpool.errors import InvalidInputError, NumericalError
from darkpool.market import (
    arrival_probability,
    exchange_pnl_step,
    exp_min_fill,
    sample_liquidity,
    step_state,
)
from darkpool.mfg import sample_initial_means
from darkpool.state import (
    BsdeControls,
    ControlPair,
    ExchangeState,
    FeeSchedule,
    MFGResult,
    PathMetrics,
    PathRecord,
    TraderState,
)
from darkpool.trader import best_response_batch, compensation_increment, driver_h
from darkpool.utils import derive_seed

logger = logging.getLogger(__name__)

TRACKED = ("t", "q", "s", "x", "nu", "ell", "c_l", "c_d", "z", "u", "dW", "dN")


@dataclass(frozen=True)
class SummaryStats:
    """Sample statistics with a fixed-bin histogram."""

    n: int
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    iqr: float
    mode: float
    min: float
    max: float
    counts: np.ndarray
    edges: np.ndarray


def summarize(values: Sequence[float], bins: int = 64) -> SummaryStats:
    """Mean, std (population), quartiles and histogram mode of a sample.

    The histogram has ``bins`` equal bins over the sample range; the mode is the centre of
    the fullest bin, clamped to the sample range. A constant sample has that value as mode.
    """
    data = np.asarray(values, dtype=float).ravel()
    if data.size == 0:
        raise InvalidInputError("cannot summarize an empty sample")
    if not np.all(np.isfinite(data)):
        raise InvalidInputError("sample contains NaN or infinite values")
    lo, hi = float(data.min()), float(data.max())
    counts, edges = np.histogram(data, bins=bins)
    top = int(np.argmax(counts))
    mode = lo if hi == lo else min(max(0.5 * (edges[top] + edges[top + 1]), lo), hi)
    q1, median, q3 = np.percentile(data, [25.0, 50.0, 75.0])
    return SummaryStats(
        n=int(data.size),
        mean=float(data.mean()),
        std=float(data.std()),
        median=float(median),
        q1=float(q1),
        q3=float(q3),
        iqr=float(q3 - q1),
        mode=float(mode),
        min=lo,
        max=hi,
        counts=counts,
        edges=edges,
    )


def summarize_metrics(metrics: PathMetrics, bins: int = 64) -> Dict[str, SummaryStats]:
    """Summaries of every per-path statistic that is reported."""
    out = {
        "impact": summarize(metrics.permanent_impact, bins),
        "terminal_inventory": summarize(metrics.terminal_inventory, bins),
        "lit_volume": summarize(metrics.lit_volume, bins),
        "exchange_pnl": summarize(metrics.exchange_pnl, bins),
    }
    for i in range(metrics.dark_volume.shape[1]):
        out[f"dark_volume_{i + 1}"] = summarize(metrics.dark_volume[:, i], bins)
    if np.all(np.isfinite(metrics.compensation)):
        out["compensation"] = summarize(metrics.compensation, bins)
        out["exchange_objective"] = summarize(metrics.exchange_objective, bins)
    return out


def impact_metric(path: PathRecord, p: MarketParams) -> float:
    """Cumulative permanent drift: sum of (gamma nu + epsilon lambda) dt."""
    return float(np.sum((p.gamma * path.nu + p.epsilon * p.lambda_rate) * path.dt))


def path_record(metrics: PathMetrics, index: int, dt: float) -> PathRecord:
    """Per-step record of one of the paths whose trajectory was kept."""
    traj = metrics.trajectories
    if not traj or index >= traj["q"].shape[0]:
        raise InvalidInputError(f"trajectory {index} was not recorded")
    return PathRecord(
        t=traj["t"][index], q=traj["q"][index], s=traj["s"][index], x=traj["x"][index],
        nu=traj["nu"][index], ell=traj["ell"][index], c_l=traj["c_l"][index],
        c_d=traj["c_d"][index], z=traj["z"][index], u=traj["u"][index],
        dW=traj["dW"][index], dN=traj["dN"][index], dt=dt,
    )


def _truncate_to_inventory(q: np.ndarray, nu: np.ndarray, fills: np.ndarray, dt: float):
    """Cap lit sales and dark fills so the inventory never goes negative."""
    nu_eff = np.maximum(nu, -np.maximum(q, 0.0) / dt)
    room = np.maximum(q + nu_eff * dt, 0.0)
    total = fills.sum(axis=1)
    over = total > room + 1e-15
    scale = np.where(over, room / np.where(total > 0, total, 1.0), 1.0)
    clamped = over | (nu_eff != nu)
    return nu_eff, fills * scale[:, None], clamped


def simulate_regulated(
    cfg: SimConfig,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    fees: FeeSchedule,
    contract: Union[float, BsdeControls] = 0.0,
    n_trajectories: int = 0,
) -> PathMetrics:
    """Simulate the regulated market under a fee schedule.

    The trader plays its best response to the fees at every step, the exchange collects
    fees, and the compensation xi accumulates through its representation with the exposures
    (z, u). A float contract is the initial value y0 and the exposures come from the schedule;
    a BsdeControls fixes y0 and holds z and u constant over the run.

    Args:
        cfg: Simulation settings: paths, seed, step, measure and trader utility.
        p: Market parameters.
        pools: Dark pools of the scenario.
        fees: Lit and dark fees with contract exposures.
        contract: Initial value of the compensation, or the full constant contract.
        n_trajectories: Leading paths whose full trajectories are kept.

    Returns:
        Per-path metrics.
    """
    if fees.n_pools != len(pools):
        raise InvalidInputError(f"fee schedule has {fees.n_pools} pools, scenario has {len(pools)}")
    fixed = contract if isinstance(contract, BsdeControls) else None
    if fixed is not None and np.shape(fixed.u) != (len(pools),):
        raise InvalidInputError(
            f"contract has {np.size(fixed.u)} jump exposures, scenario has {len(pools)} pools"
        )
    y0 = fixed.y0 if fixed is not None else float(contract)
    n, m = cfg.n_paths, len(pools)
    n_steps = max(int(round(p.T / cfg.dt)), 1)
    dt = p.T / n_steps
    rng = np.random.default_rng(cfg.seed)
    thetas = np.array([pool.theta for pool in pools])
    controlled = cfg.measure == "controlled"
    lam = p.lambda_rate

    state = TraderState(t=np.zeros(n), q=np.full(n, p.Q0), s=np.full(n, p.S0), x=np.full(n, p.X0))
    iota = np.zeros(n)
    xi = np.full(n, y0)
    impact = np.zeros(n)
    lit_volume = np.zeros(n)
    dark_volume = np.zeros((n, m))
    penalty = np.zeros(n)
    clamps = np.zeros(n, dtype=int)
    initial_rate = np.zeros(n)
    k = min(n_trajectories, n)
    traj = {name: [] for name in TRACKED} if k else {}

    for step in range(n_steps):
        q = np.asarray(state.q)
        ex_state = ExchangeState(t=state.t, q=q, s=state.s, x=state.x, iota=iota, y=xi)
        decision = fees.decide(ex_state)
        if fixed is not None:
            decision = replace(decision, z=np.full(n, fixed.z), u=np.tile(fixed.u, (n, 1)))
        nu, ell = best_response_batch(
            cfg.utility, q, decision.c_l, decision.c_d, decision.z, decision.u, p, pools
        )
        if step == 0:
            initial_rate = nu.copy()

        dW = rng.standard_normal(n) * np.sqrt(dt)
        intensity_nu = nu if controlled else np.zeros(n)
        probs = np.stack(
            [arrival_probability(pool, intensity_nu, p.k_theta, dt) for pool in pools], axis=1
        )
        arrivals = rng.random((n, m)) < probs
        liquidity = np.stack(
            [
                sample_liquidity(pool, decision.c_d[:, i], rng, size=n)
                for i, pool in enumerate(pools)
            ],
            axis=1,
        )
        fills = np.where(arrivals, np.minimum(ell, liquidity), 0.0)
        nu_eff, fills, clamped = _truncate_to_inventory(q, nu, fills, dt)
        clamps += clamped

        H = np.asarray(
            driver_h(state.t, q, decision.z, decision.u, nu, ell, decision, p, pools), dtype=float
        )
        dW0 = dW + (p.gamma * nu / p.sigma * dt if controlled and p.sigma > 0 else 0.0)
        dN = arrivals.astype(float)
        xi = xi + compensation_increment(H, decision.z, decision.u, dW0, dN, thetas, dt)

        controls = ControlPair(nu=nu_eff, ell=ell)
        iota = iota + exchange_pnl_step(ex_state, controls, fills, decision, lam, dt, p)
        impact += (p.gamma * nu_eff + p.epsilon * lam) * dt
        lit_volume += -nu_eff * dt
        dark_volume += fills
        penalty += p.phi * q**2 * dt

        if k:
            for name, value in (
                ("t", state.t), ("q", q), ("s", state.s), ("x", state.x), ("nu", nu_eff),
                ("ell", ell), ("c_l", decision.c_l), ("c_d", decision.c_d), ("z", decision.z),
                ("u", decision.u), ("dW", dW0), ("dN", dN),
            ):
                traj[name].append(np.asarray(value)[:k].copy())

        nxt = step_state(state, controls, fills, decision.c_l, lam, dt, dW, p)
        if not controlled:
            nxt = TraderState(
                t=nxt.t, q=nxt.q, s=np.asarray(state.s) + p.epsilon * lam * dt + p.sigma * dW,
                x=nxt.x,
            )
        state = TraderState(t=nxt.t, q=np.maximum(np.asarray(nxt.q), 0.0), s=nxt.s, x=nxt.x)
        if not np.all(np.isfinite(np.asarray(state.s))) or not np.all(np.isfinite(xi)):
            raise NumericalError(f"non-finite state at step {step}")

    if clamps.any():
        logger.warning("%d inventory clamp events over %d paths", int(clamps.sum()), n)
    q_T = np.asarray(state.q)
    s_T = np.asarray(state.s)
    return PathMetrics(
        permanent_impact=impact,
        terminal_inventory=q_T,
        lit_volume=lit_volume,
        dark_volume=dark_volume,
        compensation=xi,
        exchange_pnl=iota,
        terminal_cash=np.asarray(state.x),
        terminal_price=s_T,
        inventory_penalty=penalty,
        clamp_events=clamps,
        initial_rate=initial_rate,
        trajectories={name: np.stack(values, axis=1) for name, values in traj.items()},
        y0=y0,
    )


def simulate_competitive(
    cfg: SimConfig,
    equilibrium: MFGResult,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    n_trajectories: int = 0,
) -> PathMetrics:
    """Simulate the major trader against the equilibrium mean field.

    The major follows the feedback controls of the value grid; the minors enter through
    their aggregate rate in the price drift. There are no fees. Without ``cfg.n_minors``
    the aggregate is the deterministic mean-field rate mu. With it, each path draws that
    many initial minor inventories from m0; every minor then follows the equilibrium
    feedback A + B q, so the path rate is mu + B Phi (qbar0 - E0).
    """
    major = equilibrium.major
    minor = equilibrium.minor
    mu = minor.mu
    t_grid, q_grid = major.t, major.q_grid
    n, m = cfg.n_paths, len(pools)
    if major.ell0.shape[2] != m:
        raise InvalidInputError("equilibrium and scenario disagree on the number of pools")
    rng = np.random.default_rng(cfg.seed)
    zero_fee = np.zeros(n)
    offset = np.zeros(n)
    if cfg.n_minors is not None:
        means = sample_initial_means(
            minor.q_grid, minor.E0, minor.m0_std, cfg.n_minors, n,
            np.random.default_rng(derive_seed(cfg.seed, "minors")),
        )
        offset = means - minor.E0

    q = np.full(n, p.Q0)
    s = np.full(n, p.S0)
    x = np.full(n, p.X0)
    impact = np.zeros(n)
    lit_volume = np.zeros(n)
    dark_volume = np.zeros((n, m))
    penalty = np.zeros(n)
    clamps = np.zeros(n, dtype=int)
    initial_rate = np.zeros(n)
    k = min(n_trajectories, n)
    traj: Dict[str, list] = {name: [] for name in ("t", "q", "s", "nu", "ell")} if k else {}

    for step in range(t_grid.shape[0] - 1):
        dt = float(t_grid[step + 1] - t_grid[step])
        nu = np.interp(q, q_grid, major.nu0[step])
        ell = np.stack([np.interp(q, q_grid, major.ell0[step, :, i]) for i in range(m)], axis=1)
        ell = np.minimum(ell, q[:, None])
        nu = np.where(q > 0, nu, 0.0)
        if step == 0:
            initial_rate = nu.copy()
        dW = rng.standard_normal(n) * np.sqrt(dt)
        probs = np.stack(
            [arrival_probability(pool, nu, p.k_theta, dt) for pool in pools], axis=1
        ) if m else np.zeros((n, 0))
        arrivals = rng.random((n, m)) < probs
        liquidity = np.stack(
            [sample_liquidity(pool, zero_fee, rng, size=n) for pool in pools], axis=1
        ) if m else np.zeros((n, 0))
        fills = np.where(arrivals, np.minimum(ell, liquidity), 0.0)
        nu_eff, fills, clamped = _truncate_to_inventory(q, nu, fills, dt)
        clamps += clamped
        if k:
            for name, value in (("t", np.full(n, t_grid[step])), ("q", q), ("s", s),
                                ("nu", nu_eff), ("ell", ell)):
                traj[name].append(value[:k].copy())

        minor_rate = mu[step] + minor.B[step] * minor.Phi[step] * offset
        drift = p.major_gamma * nu_eff + p.gamma * minor_rate
        impact += drift * dt
        lit_volume += -nu_eff * dt
        dark_volume += fills
        penalty += p.phi * q**2 * dt
        x = x - (s + p.major_eta * nu_eff) * nu_eff * dt + s * fills.sum(axis=1)
        q = np.maximum(q + nu_eff * dt - fills.sum(axis=1), 0.0)
        s = s + drift * dt + p.sigma * dW
        if not np.all(np.isfinite(s)):
            raise NumericalError(f"non-finite price at step {step}")

    if clamps.any():
        logger.warning("%d inventory clamp events over %d paths", int(clamps.sum()), n)
    return PathMetrics(
        permanent_impact=impact,
        terminal_inventory=q,
        lit_volume=lit_volume,
        dark_volume=dark_volume,
        compensation=np.full(n, np.nan),
        exchange_pnl=np.zeros(n),
        terminal_cash=x,
        terminal_price=s,
        inventory_penalty=penalty,
        clamp_events=clamps,
        initial_rate=initial_rate,
        trajectories={name: np.stack(values, axis=1) for name, values in traj.items()},
    )


def expected_inventory_path(
    utility: str,
    fees: FeeSchedule,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    n_points: int = 1001,
) -> Dict[str, np.ndarray]:
    """Strategy table along the expected inventory path q' = nu - sum theta E[min(r, ell)]."""
    t = np.linspace(0.0, p.T, n_points)
    dt = float(t[1] - t[0])
    m = len(pools)
    q = np.zeros(n_points)
    nu = np.zeros(n_points)
    ell = np.zeros((n_points, m))
    z = np.zeros(n_points)
    u = np.zeros((n_points, m))
    q[0] = p.Q0
    for j in range(n_points):
        state = ExchangeState(t=t[j], q=np.array([q[j]]), s=p.S0, x=p.X0)
        decision = fees.decide(state)
        nu_j, ell_j = best_response_batch(
            utility, np.array([q[j]]), decision.c_l, decision.c_d, decision.z, decision.u,
            p, pools,
        )
        nu[j], ell[j], z[j], u[j] = nu_j[0], ell_j[0], decision.z[0], decision.u[0]
        if j + 1 < n_points:
            fills = sum(
                pool.theta * float(exp_min_fill(pool, ell[j, i], decision.c_d[0, i]))
                for i, pool in enumerate(pools)
            )
            q[j + 1] = max(q[j] + dt * (nu[j] - fills), 0.0)
    table = {"t": t, "q": q, "nu_hat": nu, "z": z}
    for i in range(m):
        table[f"ell_hat_{i + 1}"] = ell[:, i]
        table[f"u_{i + 1}"] = u[:, i]
    return table
