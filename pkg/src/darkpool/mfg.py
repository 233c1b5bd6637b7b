# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Competitive market: one major trader against a continuum of minor traders.

Minor players have a quadratic value h0(t) + h1(t) q + h2(t) q^2; their mean inventory E
solves a linear two-point boundary value problem driven by the major's rate, and their
density is the pushforward of m0 by an affine flow. The major solves a one-dimensional
HJB on an inventory grid. The two are coupled through the mean-field rate mu = E' and
iterated to a fixed point with relaxation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, linalg, optimize, stats

from darkpool.configuration import DarkPoolSpec, MarketParams, MFGConfig
from darkpool.errors import ConvergenceError, InvalidInputError, NumericalError
from darkpool.market import dark_liquidity_pdf, dark_liquidity_sf, exp_min_fill
from darkpool.state import ArrayOrFloat, MajorValue, MFGResult, MinorEquilibrium
from darkpool.trader import bisect_decreasing
from darkpool.utils import legendre_nodes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Grid:
    """Uniform time and inventory grids."""

    t: np.ndarray
    q: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def dq(self) -> float:
        return float(self.q[1] - self.q[0])

    @classmethod
    def from_config(cls, config: MFGConfig, T: float) -> Grid:
        return cls(
            t=np.linspace(0.0, T, config.n_time + 1),
            q=np.linspace(0.0, config.q_max, config.n_q + 1),
        )


# ---------------------------------------------------------------------------
# Minor players
# ---------------------------------------------------------------------------


def riccati_h2(t: ArrayOrFloat, alpha: float, eta: float, T: float) -> ArrayOrFloat:
    """Quadratic coefficient h2(t) = -alpha eta / (eta + alpha (T - t))."""
    t = np.asarray(t, dtype=float)
    if np.any((t < -1e-12) | (t > T + 1e-12)):
        raise InvalidInputError("riccati_h2 needs 0 <= t <= T")
    value = -alpha * eta / (eta + alpha * (T - t))
    return float(value) if value.ndim == 0 else value


def solve_minor_bvp(
    nu0_path: np.ndarray, t: np.ndarray, p: MarketParams, E0: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean inventory of the minors and its derivative.

    Solves 2 eta E'' + gamma E' = -gamma0 nu0 with E(0) = E0 and the Robin condition
    E'(T) + (alpha / eta) E(T) = 0 by central differences. The Robin condition closes the
    last row through a ghost node.

    Args:
        nu0_path: Major lit rate on the time grid.
        t: Uniform time grid.
        p: Market parameters.
        E0: Initial mean inventory.

    Returns:
        (E, mu) on the time grid, with mu = E'.
    """
    nu0_path = np.asarray(nu0_path, dtype=float)
    if nu0_path.shape != t.shape or not np.all(np.isfinite(nu0_path)):
        raise InvalidInputError("nu0_path must be finite and sampled on the time grid")
    n = t.shape[0] - 1
    dt = float(t[1] - t[0])
    eta, gamma, alpha = p.eta, p.gamma, p.alpha
    forcing = -p.major_gamma * nu0_path

    diag_c = 2.0 * eta / dt**2
    diag_g = gamma / (2.0 * dt)
    lower = np.full(n, diag_c - diag_g)
    main = np.full(n, -2.0 * diag_c)
    upper = np.full(n, diag_c + diag_g)
    rhs = forcing[1:].copy()
    rhs[0] -= (diag_c - diag_g) * E0
    lower[-1] = 4.0 * eta / dt**2
    main[-1] = -(4.0 * eta / dt**2 + 4.0 * alpha / dt + gamma * alpha / eta)

    # banded layout: row 0 super-diagonal, row 1 main, row 2 sub-diagonal
    ab = np.zeros((3, n))
    ab[0, 1:] = upper[:-1]
    ab[1] = main
    ab[2, :-1] = lower[1:]
    try:
        interior = linalg.solve_banded((1, 1), ab, rhs)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"singular tridiagonal system in the minor BVP: {exc}") from exc

    E = np.concatenate([[E0], interior])
    mu = np.empty_like(E)
    mu[1:-1] = (E[2:] - E[:-2]) / (2.0 * dt)
    mu[0] = (-3.0 * E[0] + 4.0 * E[1] - E[2]) / (2.0 * dt)
    mu[-1] = -(alpha / eta) * E[-1]
    return E, mu


def recover_h1_h0(
    E: np.ndarray, mu: np.ndarray, h2: np.ndarray, t: np.ndarray, p: MarketParams
) -> Tuple[np.ndarray, np.ndarray]:
    """h1 = 2 eta E' - 2 h2 E, and h0(t) = int_t^T h1^2 / (4 eta) ds."""
    h1 = 2.0 * p.eta * mu - 2.0 * h2 * E
    integrand = h1**2 / (4.0 * p.eta)
    from_end = integrate.cumulative_trapezoid(integrand[::-1], -t[::-1], initial=0.0)
    return h1, from_end[::-1]


def _centre(q: np.ndarray, mean: float, std: float) -> float:
    """Location of the normal whose restriction to the grid has mean ``mean``."""

    def mean_gap(loc: float) -> float:
        weights = stats.norm.pdf(q, loc=loc, scale=std)
        return float(np.sum(q * weights) / np.sum(weights) - mean)

    span = q[-1] - q[0]
    return optimize.brentq(mean_gap, q[0] - span, q[-1] + span, xtol=1e-14)


def initial_law(q: np.ndarray, mean: float, std: float) -> Any:
    """Normal law truncated to the grid range, located so its grid density has mean ``mean``.

    Returns:
        A frozen ``scipy.stats.truncnorm`` distribution.
    """
    if not q[0] < mean < q[-1]:
        raise InvalidInputError(f"initial mean {mean} must lie strictly inside the grid")
    loc = _centre(q, mean, std)
    return stats.truncnorm((q[0] - loc) / std, (q[-1] - loc) / std, loc=loc, scale=std)


def initial_density(q: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Truncated Gaussian density on the grid whose discrete mean equals ``mean``."""
    dq = float(q[1] - q[0])
    if not q[0] <= mean <= q[-1]:
        raise InvalidInputError(f"initial mean {mean} lies outside the inventory grid")
    edge = np.isclose(mean, [q[0], q[-1]], rtol=0.0, atol=1e-12)
    if edge.any():
        # a mean on the boundary leaves only a point mass
        point = np.zeros_like(q)
        point[0 if edge[0] else -1] = 1.0 / dq
        return point
    weights = stats.norm.pdf(q, loc=_centre(q, mean, std), scale=std)
    return weights / (weights.sum() * dq)


def sample_initial_means(
    q: np.ndarray,
    mean: float,
    std: float,
    n_minors: int,
    size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Average initial inventory of ``n_minors`` minors drawn from m0, one value per path."""
    if n_minors < 1:
        raise InvalidInputError("n_minors must be at least one")
    if np.isclose(mean, [q[0], q[-1]], rtol=0.0, atol=1e-12).any():
        return np.full(size, float(mean))
    draws = initial_law(q, mean, std).rvs(size=(size, n_minors), random_state=rng)
    return draws.mean(axis=1)


def _deposit(positions: np.ndarray, masses: np.ndarray, q: np.ndarray) -> Tuple[np.ndarray, int]:
    """Linear (cloud-in-cell) deposit of point masses onto the grid; returns clamped count."""
    dq = float(q[1] - q[0])
    coord = (positions - q[0]) / dq
    clamped = int(np.sum((coord < 0) | (coord > q.shape[0] - 1)))
    coord = np.clip(coord, 0.0, q.shape[0] - 1)
    left = np.minimum(np.floor(coord).astype(int), q.shape[0] - 2)
    frac = coord - left
    out = np.zeros_like(q)
    np.add.at(out, left, masses * (1.0 - frac))
    np.add.at(out, left + 1, masses * frac)
    return out / dq, clamped


def fp_pushforward(
    t: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
    q: np.ndarray,
    m0: np.ndarray,
    snapshot_times: Sequence[float] = (),
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Transport m0 by the affine flow q -> Phi(t) q + psi(t).

    Phi = exp(int B) and psi = Phi int A / Phi. Snapshots deposit the transported grid
    masses back onto the grid, which conserves mass and the first moment.

    Returns:
        (Phi, psi, m snapshots, snapshot times, E) with E = Phi * mean(m0) + psi.
    """
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
        raise InvalidInputError("flow coefficients must be finite")
    log_phi = integrate.cumulative_simpson(B, x=t, initial=0.0)
    Phi = np.exp(log_phi)
    if np.any(Phi <= 0) or not np.all(np.isfinite(Phi)):
        raise NumericalError("flow coefficient Phi underflowed")
    psi = Phi * integrate.cumulative_simpson(A / Phi, x=t, initial=0.0)

    dq = float(q[1] - q[0])
    masses = m0 * dq
    mean0 = float(np.sum(q * masses))
    snap_t = np.asarray(snapshot_times, dtype=float)
    snapshots = np.zeros((snap_t.shape[0], q.shape[0]))
    clamped_total = 0
    for k, ts in enumerate(snap_t):
        phi_s = float(np.interp(ts, t, Phi))
        psi_s = float(np.interp(ts, t, psi))
        snapshots[k], clamped = _deposit(phi_s * q + psi_s, masses, q)
        clamped_total += clamped
    if clamped_total:
        logger.warning(
            "%d transported grid masses left [0, %.3g] and were clamped to the edge",
            clamped_total,
            q[-1],
        )
    return Phi, psi, snapshots, snap_t, Phi * mean0 + psi


def pushforward_density(
    m0: Callable[[np.ndarray], np.ndarray], Phi: float, psi: float, q: ArrayOrFloat
) -> np.ndarray:
    """Closed-form transported density m(t, q) = m0((q - psi) / Phi) / Phi."""
    if Phi <= 0:
        raise InvalidInputError("Phi must be positive")
    return m0((np.asarray(q, dtype=float) - psi) / Phi) / Phi


def solve_minor(
    nu0_path: np.ndarray,
    grid: Grid,
    p: MarketParams,
    config: MFGConfig,
    snapshot_times: Optional[Sequence[float]] = None,
) -> MinorEquilibrium:
    """Minor best response to a major rate path: coefficients, mean path and densities."""
    t = grid.t
    h2 = np.asarray(riccati_h2(t, p.alpha, p.eta, p.T))
    E, mu = solve_minor_bvp(nu0_path, t, p, config.E0)
    h1, h0 = recover_h1_h0(E, mu, h2, t, p)
    A = h1 / (2.0 * p.eta)
    B = h2 / p.eta
    m0 = initial_density(grid.q, config.E0, config.m0_std)
    times = config.snapshot_times if snapshot_times is None else snapshot_times
    Phi, psi, m, snap_t, _ = fp_pushforward(t, A, B, grid.q, m0, times)
    return MinorEquilibrium(
        t=t, h0=h0, h1=h1, h2=h2, E=E, mu=mu, A=A, B=B, Phi=Phi, psi=psi,
        q_grid=grid.q, m=m, snapshot_t=snap_t, E0=config.E0, m0_std=config.m0_std,
    )


# ---------------------------------------------------------------------------
# Major player
# ---------------------------------------------------------------------------


def _backward_difference(h: np.ndarray, dq: float) -> np.ndarray:
    d = np.empty_like(h)
    d[1:] = (h[1:] - h[:-1]) / dq
    d[0] = d[1]
    return d


def _threshold(marginal: np.ndarray, q: np.ndarray) -> float:
    """Inventory b where the marginal value of inventory crosses zero."""
    mid = q - 0.5 * (q[1] - q[0])
    values = marginal[1:]
    centres = mid[1:]
    if values[0] <= 0:
        return 0.0
    below = np.nonzero(values <= 0)[0]
    if below.size == 0:
        return float(q[-1])
    j = int(below[0])
    x0, x1 = centres[j - 1], centres[j]
    y0, y1 = values[j - 1], values[j]
    return float(x0 + (x1 - x0) * y0 / (y0 - y1))


def _check_monotone(marginal: np.ndarray, strict: bool) -> None:
    rise = np.diff(marginal[1:])
    tol = 1e-6 * (1.0 + np.max(np.abs(marginal)))
    if np.any(rise > tol):
        message = f"marginal value is not monotone in q (max rise {rise.max():.3g})"
        if strict:
            raise NumericalError(message)
        logger.debug(message)


def major_dark_alloc(
    q: ArrayOrFloat,
    dq_h0_slice: np.ndarray,
    q_grid: np.ndarray,
    pools: Sequence[DarkPoolSpec],
    c_d: Optional[np.ndarray] = None,
    iters: int = 40,
    strict: bool = True,
) -> Tuple[np.ndarray, float]:
    """Dark volumes of the major at one time slice.

    Args:
        q: Inventories, scalar or array.
        dq_h0_slice: Backward difference of h0 on ``q_grid``.
        q_grid: Inventory grid.
        pools: Dark pools of the major.
        c_d: Dark fees per pool; zero in the competitive market.
        iters: Bisection iterations.
        strict: Raise on a non-monotone marginal instead of logging it.

    Returns:
        (ell with shape (n, M), threshold b). With one pool ell = min(q, (q - b)^+);
        with several the budget (q - b)^+ is split by equalising
        theta_i (1 - F_i(ell_i)) * (-h0_q(q - ell_i)).
    """
    q = np.atleast_1d(np.asarray(q, dtype=float))
    m = len(pools)
    c_d = np.zeros(m) if c_d is None else np.asarray(c_d, dtype=float)
    _check_monotone(dq_h0_slice, strict)
    b = _threshold(dq_h0_slice, q_grid)
    budget = np.minimum(q, np.maximum(q - b, 0.0))
    if m == 1:
        return budget[:, None], b

    centres = q_grid - 0.5 * (q_grid[1] - q_grid[0])

    def marginal(i: int, ell: np.ndarray) -> np.ndarray:
        slope = np.interp(q - ell, centres[1:], dq_h0_slice[1:])
        survive = np.asarray(dark_liquidity_sf(pools[i], c_d[i], np.maximum(ell, 0.0)))
        return pools[i].theta * survive * (-slope)

    zeros = np.zeros_like(q)
    if m == 2:
        ell1 = bisect_decreasing(
            lambda e: marginal(0, e) - marginal(1, budget - e), zeros, budget, iters
        )
        return np.stack([ell1, budget - ell1], axis=1), b

    def volumes(level: np.ndarray) -> np.ndarray:
        cols = []
        for i in range(m):
            ell_i = bisect_decreasing(lambda e, i=i: marginal(i, e) - level, zeros, budget, iters)
            cols.append(np.where(marginal(i, zeros) <= level, 0.0, ell_i))
        return np.stack(cols, axis=1)

    top = np.max([marginal(i, zeros) for i in range(m)], axis=0)
    level = bisect_decreasing(lambda lv: volumes(lv).sum(axis=1) - budget, zeros, top, iters)
    ell = volumes(level)
    total = ell.sum(axis=1)
    scale = np.where(total > 0, budget / np.where(total > 0, total, 1.0), 0.0)
    return ell * scale[:, None], b


def _jump_term(
    h: np.ndarray,
    q: np.ndarray,
    ell: np.ndarray,
    pools: Sequence[DarkPoolSpec],
    c_d: np.ndarray,
    quad_nodes: int,
) -> np.ndarray:
    """sum_i theta_i E[h(q - min(ell_i, r_i)) - h(q)] by Gauss-Legendre plus the tail atom."""
    nodes, weights = legendre_nodes(quad_nodes)
    total = np.zeros_like(q)
    for i, pool in enumerate(pools):
        ell_i = ell[:, i]
        r0 = float(np.exp(-pool.k_c * c_d[i])) * pool.support_eps
        lo = np.minimum(ell_i, r0)
        span = np.maximum(ell_i - r0, 0.0)
        x = lo[:, None] + span[:, None] * nodes[None, :]
        gain = np.interp(q[:, None] - x, q, h) - h[:, None]
        dens = np.asarray(dark_liquidity_pdf(pool, c_d[i], x))
        body = span * np.sum(weights[None, :] * dens * gain, axis=1)
        tail = np.asarray(dark_liquidity_sf(pool, c_d[i], ell_i)) * (
            np.interp(q - ell_i, q, h) - h
        )
        total += pool.theta * (body + tail)
    return total


def _lit_rate(marginal: np.ndarray, q: np.ndarray, p: MarketParams) -> np.ndarray:
    nu = np.minimum((marginal + p.major_gamma * q) / (2.0 * p.major_eta), 0.0)
    nu[q <= 0] = 0.0
    return nu


def solve_major_hjb(
    mu_path: np.ndarray,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    grid: Grid,
    quad_nodes: int = 32,
    alloc_iters: int = 40,
) -> MajorValue:
    """Backward explicit sweep of the major's reduced HJB.

    The lit rate is non-positive, so the inventory moves down and the upwind derivative is
    the backward difference. Dark executions jump down in q and are handled by interpolation.

    Args:
        mu_path: Mean-field minor rate on the time grid.
        p: Market parameters; the major uses gamma0, eta0 and alpha0.
        pools: Dark pools of the major, possibly empty.
        grid: Time and inventory grids.
        quad_nodes: Gauss-Legendre nodes of the jump expectation.
        alloc_iters: Bisection iterations of the dark allocation.

    Returns:
        The value grid with its feedback controls and threshold path.
    """
    t, q = grid.t, grid.q
    dt, dq = grid.dt, grid.dq
    if mu_path.shape != t.shape:
        raise InvalidInputError("mu_path must be sampled on the time grid")
    theta_sum = sum(pool.theta for pool in pools)
    if theta_sum * dt > 1.0:
        raise NumericalError(
            f"explicit jump step unstable: sum(theta) * dt = {theta_sum * dt:.3g} > 1; reduce dt"
        )
    n_t, n_q, m = t.shape[0], q.shape[0], len(pools)
    c_d = np.zeros(m)
    h = np.empty((n_t, n_q))
    nu0 = np.zeros((n_t, n_q))
    ell0 = np.zeros((n_t, n_q, m))
    b = np.zeros(n_t)
    h[-1] = -p.major_alpha * q**2

    def controls(slice_h: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        marginal = _backward_difference(slice_h, dq)
        nu = _lit_rate(marginal, q, p)
        if m:
            ell, thr = major_dark_alloc(q, marginal, q, pools, c_d, alloc_iters, strict=False)
        else:
            ell, thr = np.zeros((n_q, 0)), float(q[-1])
        return marginal, nu, ell, thr

    for n in range(n_t - 1, -1, -1):
        marginal, nu, ell, thr = controls(h[n])
        nu0[n], ell0[n], b[n] = nu, ell, thr
        if n == 0:
            break
        courant = float(np.max(np.abs(nu))) * dt / dq
        if courant > 1.0:
            raise NumericalError(
                f"CFL violated at t={t[n]:.4g}: |nu| dt / dq = {courant:.3g} > 1; "
                "reduce n_time or coarsen the inventory grid"
            )
        lit = -p.phi * q**2 - p.major_eta * nu**2 + (marginal + p.major_gamma * q) * nu
        jumps = _jump_term(h[n], q, ell, pools, c_d, quad_nodes) if m else 0.0
        h[n - 1] = h[n] + dt * (lit + p.gamma * mu_path[n] * q + jumps)

    return MajorValue(t=t, q_grid=q, h0_grid=h, nu0=nu0, ell0=ell0, b=b)


def major_mean_inventory(
    major: MajorValue, p: MarketParams, pools: Sequence[DarkPoolSpec]
) -> Tuple[np.ndarray, np.ndarray]:
    """Expected major inventory and the rate path it implies.

    Q' = nu0(t, Q) - sum_i theta_i E[min(r_i, ell_i(t, Q))], integrated forward.
    """
    t, q = major.t, major.q_grid
    Q = np.zeros_like(t)
    rate = np.zeros_like(t)
    Q[0] = p.Q0
    for n in range(t.shape[0]):
        rate[n] = float(np.interp(Q[n], q, major.nu0[n]))
        if n == t.shape[0] - 1:
            break
        fills = 0.0
        for i, pool in enumerate(pools):
            ell_i = float(np.interp(Q[n], q, major.ell0[n, :, i]))
            fills += pool.theta * float(exp_min_fill(pool, min(ell_i, Q[n]), 0.0))
        Q[n + 1] = max(Q[n] + (t[n + 1] - t[n]) * (rate[n] - fills), 0.0)
    return Q, rate


def mfg_fixed_point(
    config: MFGConfig,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    mu_init: Optional[np.ndarray] = None,
) -> MFGResult:
    """Relaxed fixed point between the major HJB and the minor response.

    Args:
        config: Grids, relaxation and stopping rule.
        p: Market parameters.
        pools: Dark pools of the major.
        mu_init: Initial guess of the mean-field rate; zero by default.

    Returns:
        The minor equilibrium, the major value, the major mean inventory and the residual
        history.

    Raises:
        ConvergenceError: When ``max_iters`` is reached before the sup-norm test passes.
    """
    grid = Grid.from_config(config, p.T)
    if grid.q[-1] < p.Q0:
        raise InvalidInputError(f"q_max={config.q_max} must cover the initial inventory {p.Q0}")
    mu = np.zeros_like(grid.t) if mu_init is None else np.asarray(mu_init, dtype=float).copy()
    residuals: List[float] = []
    logger.info(
        "Solving competitive equilibrium: %d x %d grid, omega=%.2f", config.n_time, config.n_q,
        config.omega,
    )
    for iteration in range(1, config.max_iters + 1):
        major = solve_major_hjb(mu, p, pools, grid, config.quad_nodes, config.alloc_iters)
        Q0bar, nu0_path = major_mean_inventory(major, p, pools)
        E, mu_new = solve_minor_bvp(nu0_path, grid.t, p, config.E0)
        residual = float(np.max(np.abs(mu_new - mu)))
        residuals.append(residual)
        logger.info("Fixed-point iteration %d: residual %.3e", iteration, residual)
        mu = (1.0 - config.omega) * mu + config.omega * mu_new
        if residual < config.tol:
            minor = solve_minor(nu0_path, grid, p, config)
            return MFGResult(
                minor=minor, major=major, Q0bar=Q0bar, nu0_path=nu0_path,
                iterations=iteration, residuals=residuals,
            )
    raise ConvergenceError(
        "mean-field fixed point did not converge", config.max_iters, residuals[-1]
    )
