# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Best responses of the large trader, BSDE drivers and the realised compensation.

Two trader models are supported: linear utility (driver ``f``) and exponential utility
(driver ``h``). Dark allocations equalise per-pool marginal values under the budget
``sum(ell) <= q``; lit rates are the negative part of the first-order condition.
"""

from __future__ import annotations

import logging
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import optimize

from darkpool.configuration import DarkPoolSpec, MarketParams
from darkpool.errors import AdmissibilityError, ConvergenceError, InvalidInputError
from darkpool.market import (
    dark_liquidity_sf,
    exp_min_exponential_moment,
    exp_min_linear_moment,
)
from darkpool.state import AllocationResult, ArrayOrFloat, ControlPair, FeeDecision, PathRecord

logger = logging.getLogger(__name__)

Fees = Union[FeeDecision, Tuple[ArrayOrFloat, Union[Sequence[float], np.ndarray]]]
Utility = Literal["linear", "exponential"]


def _split_fees(fees: Fees, n_pools: int) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(fees, FeeDecision):
        c_l, c_d = fees.c_l, fees.c_d
    else:
        c_l, c_d = fees
    c_l = np.asarray(c_l, dtype=float)
    c_d = np.asarray(c_d, dtype=float)
    if c_d.ndim == 0:
        c_d = np.full(n_pools, float(c_d))
    return c_l, c_d


def _out(value: np.ndarray) -> ArrayOrFloat:
    return float(value) if np.ndim(value) == 0 else value


# ---------------------------------------------------------------------------
# Dark allocation
# ---------------------------------------------------------------------------


def allocation_marginal(
    kind: Utility,
    pool: DarkPoolSpec,
    ell: ArrayOrFloat,
    c_d: ArrayOrFloat,
    q: ArrayOrFloat,
    rho: float = 0.0,
    alpha: float = 0.0,
    weight: ArrayOrFloat = 1.0,
) -> np.ndarray:
    """Marginal value of posting one more share in a pool.

    linear: 2 theta (q - ell) (1 - F(ell e^{k c})).
    exponential: 2 theta w rho alpha (q - ell) exp(-rho alpha ell (2q - ell)) (1 - F(ell e^{k c})),
    where w = exp(-rho u) is the jump-exposure weight.
    """
    ell = np.asarray(ell, dtype=float)
    q = np.asarray(q, dtype=float)
    survive = np.asarray(dark_liquidity_sf(pool, c_d, np.maximum(ell, 0.0)))
    base = 2.0 * pool.theta * (q - ell) * survive
    if kind == "linear":
        return base
    return base * rho * alpha * np.asarray(weight) * np.exp(-rho * alpha * ell * (2.0 * q - ell))


def _equalise_marginals(
    q: float,
    marginals: List[Callable[[float], float]],
    tol: float,
    max_iter: int,
) -> AllocationResult:
    """Bisection on the common marginal level with monotone inner root finds.

    The level is bracketed by the marginals at the even split q / M and bisected
    geometrically, so levels many orders of magnitude below one are resolved.
    """

    def volumes(level: float) -> np.ndarray:
        out = np.zeros(len(marginals))
        for i, marginal in enumerate(marginals):
            if marginal(0.0) <= level:
                continue
            out[i] = optimize.brentq(lambda e: marginal(e) - level, 0.0, q, xtol=1e-15)
        return out

    ell = volumes(0.0)
    if ell.sum() <= q:
        return AllocationResult(ell=ell, multiplier=0.0, iterations=0)
    even = [marginal(q / len(marginals)) for marginal in marginals]
    lo, hi = min(even), max(even)
    excess = 0.0
    for iteration in range(1, max_iter + 1):
        mid = float(np.sqrt(lo * hi)) if lo > 0 else 0.5 * (lo + hi)
        ell = volumes(mid)
        excess = ell.sum() - q
        if abs(excess) <= tol * max(q, 1.0) or hi - lo <= 1e-15 * hi:
            # put the residual on the pool with the largest share so the budget binds
            ell[np.argmax(ell)] -= excess
            return AllocationResult(ell=np.clip(ell, 0.0, q), multiplier=mid, iterations=iteration)
        if excess > 0:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError("dark allocation multiplier did not converge", max_iter, abs(excess))


def _allocate(
    kind: Utility,
    q: float,
    pools: Sequence[DarkPoolSpec],
    c_d: np.ndarray,
    rho: float,
    alpha: float,
    weights: np.ndarray,
    tol: float,
    max_iter: int,
) -> AllocationResult:
    if q < 0 and not np.isclose(q, 0.0):
        raise InvalidInputError("inventory must be non-negative for an allocation")
    m = len(pools)
    if q <= 0:
        return AllocationResult(ell=np.zeros(m))
    if m == 1:
        return AllocationResult(ell=np.array([q]))
    marginals = [
        (lambda e, pool=pool, c=c, w=w: float(
            allocation_marginal(kind, pool, e, c, q, rho, alpha, w)
        ))
        for pool, c, w in zip(pools, c_d, weights)
    ]
    return _equalise_marginals(q, marginals, tol, max_iter)


def optimal_dark_alloc_linear(
    q: float,
    pools: Sequence[DarkPoolSpec],
    fees: Union[Sequence[float], np.ndarray],
    tol: float = 1e-12,
    max_iter: int = 200,
) -> AllocationResult:
    """Optimal dark volumes of the linear-utility trader.

    Args:
        q: Current inventory.
        pools: Dark pools.
        fees: Dark fee per pool.
        tol: Budget tolerance of the multiplier bisection.
        max_iter: Bisection iteration cap.

    Returns:
        ell = q for a single pool; otherwise the volumes equalising
        2 theta_i (q - ell_i)(1 - F_i(ell_i e^{k c_i})) under sum(ell) = q.
    """
    c_d = np.broadcast_to(np.asarray(fees, dtype=float), (len(pools),))
    return _allocate("linear", q, pools, c_d, 0.0, 0.0, np.ones(len(pools)), tol, max_iter)


def optimal_dark_alloc_exp(
    q: float,
    pools: Sequence[DarkPoolSpec],
    fees: Union[Sequence[float], np.ndarray],
    rho: float,
    alpha: float,
    u: Optional[Union[Sequence[float], np.ndarray]] = None,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> AllocationResult:
    """Optimal dark volumes of the exponential-utility trader.

    With jump exposures ``u`` each pool's marginal is weighted by exp(-rho u_i); u = 0
    gives the unweighted equal-marginal condition. All shares are allocated when M > 1.
    """
    m = len(pools)
    c_d = np.broadcast_to(np.asarray(fees, dtype=float), (m,))
    u_arr = np.zeros(m) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (m,))
    weights = np.exp(-rho * u_arr)
    return _allocate("exponential", q, pools, c_d, rho, alpha, weights, tol, max_iter)


def bisect_decreasing(
    fn: Callable[[np.ndarray], np.ndarray],
    lo: np.ndarray,
    hi: np.ndarray,
    iters: int,
    geometric: bool = False,
) -> np.ndarray:
    """Vectorised root of a decreasing function on [lo, hi] (fn(lo) >= 0 >= fn(hi)).

    With ``geometric`` the midpoint of a positive bracket is sqrt(lo hi).
    """
    lo = lo.copy()
    hi = hi.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if geometric:
            mid = np.where(lo > 0, np.sqrt(np.maximum(lo * hi, 0.0)), mid)
        positive = fn(mid) > 0
        lo = np.where(positive, mid, lo)
        hi = np.where(positive, hi, mid)
    return 0.5 * (lo + hi)


def allocate_batch(
    kind: Utility,
    q: np.ndarray,
    pools: Sequence[DarkPoolSpec],
    c_d: np.ndarray,
    rho: float = 0.0,
    alpha: float = 0.0,
    u: Optional[np.ndarray] = None,
    iters: int = 60,
) -> np.ndarray:
    """Optimal dark volumes for a batch of inventories, shape (n, M).

    Two pools reduce to one bisection along the budget line ell_2 = q - ell_1; more pools
    use a nested bisection on the common marginal level.
    """
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    n, m = q.shape[0], len(pools)
    c_d = np.broadcast_to(np.asarray(c_d, dtype=float), (n, m))
    u = np.zeros((n, m)) if u is None else np.broadcast_to(np.asarray(u, dtype=float), (n, m))
    weights = np.exp(-rho * u)
    if m == 1:
        return q[:, None].copy()

    def marginal(i: int, ell: np.ndarray) -> np.ndarray:
        return allocation_marginal(kind, pools[i], ell, c_d[:, i], q, rho, alpha, weights[:, i])

    if m == 2:
        ell1 = bisect_decreasing(
            lambda e: marginal(0, e) - marginal(1, q - e), np.zeros(n), q, iters
        )
        return np.stack([ell1, q - ell1], axis=1)

    zeros = np.zeros(n)
    even = np.stack([marginal(i, q / m) for i in range(m)])

    def volumes(level: np.ndarray) -> np.ndarray:
        cols = []
        for i in range(m):
            ell_i = bisect_decreasing(lambda e, i=i: marginal(i, e) - level, zeros, q, iters)
            cols.append(np.where(marginal(i, zeros) <= level, 0.0, ell_i))
        return np.stack(cols, axis=1)

    level = bisect_decreasing(
        lambda lv: volumes(lv).sum(axis=1) - q, even.min(axis=0), even.max(axis=0), iters, True
    )
    ell = volumes(level)
    total = ell.sum(axis=1)
    scale = np.where(total > 0, q / np.where(total > 0, total, 1.0), 0.0)
    return ell * scale[:, None]


# ---------------------------------------------------------------------------
# Lit rate
# ---------------------------------------------------------------------------


def _z_term(p: MarketParams, z: ArrayOrFloat) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if p.sigma == 0:
        if np.any(z != 0):
            raise InvalidInputError("a diffusion exposure z needs sigma > 0")
        return np.zeros_like(z)
    return p.gamma * z / p.sigma


def _rate_root(
    a0: np.ndarray, jump: np.ndarray, k: float, eta: float, iters: int = 100
) -> np.ndarray:
    """Maximiser over nu <= 0 of a0 nu - eta nu^2 + jump e^{k nu}.

    The first-order condition is g(nu) = a0 - 2 eta nu + k jump e^{k nu} = 0; g is strictly
    decreasing when 2 eta > k^2 jump. Safeguarded Newton inside a bracket.
    """
    a0, jump = np.broadcast_arrays(np.asarray(a0, float), np.asarray(jump, float))
    if np.any(k * k * jump >= 2.0 * eta):
        raise AdmissibilityError(
            "second-order condition fails: the driver is not strictly concave in the lit rate"
        )

    def g(nu: np.ndarray) -> np.ndarray:
        return a0 - 2.0 * eta * nu + k * jump * np.exp(k * nu)

    def dg(nu: np.ndarray) -> np.ndarray:
        return -2.0 * eta + k * k * jump * np.exp(k * nu)

    at_zero = g(np.zeros_like(a0)) >= 0
    hi = np.zeros_like(a0)
    lo = np.minimum((a0 + np.minimum(k * jump, 0.0)) / (2.0 * eta), 0.0) - 1.0
    nu = 0.5 * (lo + hi)
    for _ in range(iters):
        val = g(nu)
        lo = np.where(val > 0, nu, lo)
        hi = np.where(val > 0, hi, nu)
        step = nu - val / dg(nu)
        inside = (step > lo) & (step < hi)
        nu = np.where(inside, step, 0.5 * (lo + hi))
        if np.all(np.abs(val) < 1e-14):
            break
    return np.where(at_zero, 0.0, np.minimum(nu, 0.0))


def _linear_jump_sum(
    q: np.ndarray, ell: np.ndarray, c_d: np.ndarray, pools: Sequence[DarkPoolSpec]
) -> np.ndarray:
    total = np.zeros(np.shape(q))
    for i, pool in enumerate(pools):
        ell_i = np.minimum(ell[..., i], np.maximum(q, 0.0))
        total = total + pool.theta * exp_min_linear_moment(
            pool, ell_i, c_d[..., i], np.maximum(q, 0.0)
        )
    return total


def _exponential_jump_brackets(
    q: np.ndarray,
    ell: np.ndarray,
    c_d: np.ndarray,
    u: np.ndarray,
    pools: Sequence[DarkPoolSpec],
    p: MarketParams,
) -> np.ndarray:
    """Sum over pools of (e^{-rho u} E[e^{-rho alpha m(2q - m)}] + rho u - 1) theta / rho."""
    total = np.zeros(np.shape(q))
    qq = np.maximum(q, 0.0)
    for i, pool in enumerate(pools):
        ell_i = np.minimum(ell[..., i], qq)
        moment = exp_min_exponential_moment(pool, ell_i, c_d[..., i], qq, p.rho, p.alpha)
        total = total + (
            (np.exp(-p.rho * u[..., i]) * moment + p.rho * u[..., i] - 1.0) * pool.theta / p.rho
        )
    return total


def optimal_lit_rate_linear(
    q: ArrayOrFloat,
    z: ArrayOrFloat,
    c_l: ArrayOrFloat,
    p: MarketParams,
    ell_hat: Optional[np.ndarray] = None,
    pools: Sequence[DarkPoolSpec] = (),
    c_d: Optional[np.ndarray] = None,
) -> ArrayOrFloat:
    """Lit rate of the linear-utility trader: (-(2 alpha q - c_l - gamma z / sigma) / (2 eta))^-.

    When k_theta > 0 the dark term of the driver depends on the rate and the first-order
    condition is solved numerically; ``pools``, ``ell_hat`` and ``c_d`` are then required.
    """
    q = np.asarray(q, dtype=float)
    a0 = np.asarray(c_l, dtype=float) - 2.0 * p.alpha * q + _z_term(p, z)
    if p.k_theta == 0:
        nu = np.minimum(a0 / (2.0 * p.eta), 0.0)
    else:
        if ell_hat is None or c_d is None or not pools:
            raise InvalidInputError("k_theta > 0 needs the dark allocation, fees and pools")
        jump = p.alpha * _linear_jump_sum(q, np.asarray(ell_hat), np.asarray(c_d), pools)
        nu = _rate_root(a0, jump, p.k_theta, p.eta)
    return _out(np.where(q > 0, nu, 0.0))


def optimal_lit_rate_exp(
    q: ArrayOrFloat,
    c_l: ArrayOrFloat,
    u: Optional[np.ndarray],
    p: MarketParams,
    ell_hat: Optional[np.ndarray] = None,
    pools: Sequence[DarkPoolSpec] = (),
    c_d: Optional[np.ndarray] = None,
) -> ArrayOrFloat:
    """Lit rate of the exponential-utility trader: (-(2 alpha q - c_l) / (2 eta))^-."""
    q = np.asarray(q, dtype=float)
    a0 = np.asarray(c_l, dtype=float) - 2.0 * p.alpha * q
    if p.k_theta == 0:
        nu = np.minimum(a0 / (2.0 * p.eta), 0.0)
    else:
        if ell_hat is None or c_d is None or u is None or not pools:
            raise InvalidInputError("k_theta > 0 needs the dark allocation, fees, u and pools")
        brackets = _exponential_jump_brackets(
            q, np.asarray(ell_hat), np.asarray(c_d), np.asarray(u), pools, p
        )
        nu = _rate_root(a0, -brackets, p.k_theta, p.eta)
    return _out(np.where(q > 0, nu, 0.0))


def check_second_order_linear(
    q: float, ell: np.ndarray, c_d: np.ndarray, p: MarketParams, pools: Sequence[DarkPoolSpec]
) -> bool:
    """Strict concavity of f in nu on nu <= 0: -2 eta + alpha k^2 e^{k nu} sum(...) < 0."""
    jump = float(p.alpha * _linear_jump_sum(np.asarray(q), np.asarray(ell), np.asarray(c_d), pools))
    return -2.0 * p.eta + p.k_theta**2 * jump < 0


def is_admissible_u(
    q: float,
    u: np.ndarray,
    ell: np.ndarray,
    c_d: np.ndarray,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
) -> bool:
    """Membership of u in the concavity set for every nu <= 0.

    -2 eta - (1/rho) k^2 e^{k nu} sum theta (e^{-rho u} E[...] + rho u - 1) < 0; the left
    side is largest at nu = 0 when the sum is negative.
    """
    if p.k_theta == 0:
        return True
    brackets = float(
        _exponential_jump_brackets(
            np.asarray(q), np.asarray(ell), np.asarray(c_d), np.asarray(u), pools, p
        )
    )
    return -2.0 * p.eta - p.k_theta**2 * min(brackets, 0.0) < 0


# ---------------------------------------------------------------------------
# Drivers and Hamiltonian
# ---------------------------------------------------------------------------


def driver_f(
    t: ArrayOrFloat,
    q: ArrayOrFloat,
    z: ArrayOrFloat,
    nu: ArrayOrFloat,
    ell: np.ndarray,
    fees: Fees,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
) -> ArrayOrFloat:
    """Linear-utility BSDE driver f^{nu, ell}(t, q, z)."""
    q = np.asarray(q, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c_l, c_d = _split_fees(fees, len(pools))
    ell = np.asarray(ell, dtype=float)
    value = (
        -p.phi * q**2
        - p.eta * nu**2
        + c_l * nu
        + q * (p.epsilon * p.lambda_rate - 2.0 * p.alpha * nu)
        + _z_term(p, z) * nu
        + p.alpha * np.exp(p.k_theta * nu) * _linear_jump_sum(q, ell, c_d, pools)
    )
    return _out(value)


def driver_h(
    t: ArrayOrFloat,
    q: ArrayOrFloat,
    z: ArrayOrFloat,
    u: np.ndarray,
    nu: ArrayOrFloat,
    ell: np.ndarray,
    fees: Fees,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
) -> ArrayOrFloat:
    """Exponential-utility BSDE driver h^{nu, ell}(t, q, z, u)."""
    q = np.asarray(q, dtype=float)
    nu = np.asarray(nu, dtype=float)
    z = np.asarray(z, dtype=float)
    c_l, c_d = _split_fees(fees, len(pools))
    u = np.broadcast_to(np.asarray(u, dtype=float), np.shape(ell))
    brackets = _exponential_jump_brackets(q, np.asarray(ell, dtype=float), c_d, u, pools, p)
    value = (
        -p.phi * q**2
        - p.eta * nu**2
        + c_l * nu
        + q * (p.epsilon * p.lambda_rate - 2.0 * p.alpha * nu)
        - 0.5 * p.rho * (z + q * p.sigma) ** 2
        - brackets * np.exp(p.k_theta * nu)
    )
    return _out(value)


def best_response_batch(
    utility: Utility,
    q: np.ndarray,
    c_l: np.ndarray,
    c_d: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    iters: int = 60,
) -> Tuple[np.ndarray, np.ndarray]:
    """Optimal (nu, ell) for a batch of states; zero controls where q <= 0."""
    q = np.asarray(q, dtype=float)
    if utility == "linear":
        ell = allocate_batch("linear", q, pools, c_d, iters=iters)
        nu = optimal_lit_rate_linear(q, z, c_l, p, ell, pools, c_d)
    else:
        ell = allocate_batch("exponential", q, pools, c_d, p.rho, p.alpha, u, iters=iters)
        nu = optimal_lit_rate_exp(q, c_l, u, p, ell, pools, c_d)
    active = (q > 0)[:, None]
    return np.asarray(nu, dtype=float), np.where(active, ell, 0.0)


def hamiltonian_H(
    t: float,
    q: float,
    z: float,
    u: Union[Sequence[float], np.ndarray],
    fees: Fees,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
) -> Tuple[float, ControlPair]:
    """sup over (nu, ell) of the exponential driver, with its maximiser.

    The sup splits into the dark allocation (independent of nu) followed by the lit rate.
    """
    c_l, c_d = _split_fees(fees, len(pools))
    u_arr = np.broadcast_to(np.asarray(u, dtype=float), (len(pools),))
    if q <= 0:
        ell = np.zeros(len(pools))
        nu = 0.0
    else:
        ell = optimal_dark_alloc_exp(q, pools, c_d, p.rho, p.alpha, u_arr).ell
        if not is_admissible_u(q, u_arr, ell, c_d, p, pools):
            raise AdmissibilityError(f"u={u_arr.tolist()} violates the concavity condition")
        nu = float(optimal_lit_rate_exp(q, c_l, u_arr, p, ell, pools, c_d))
    value = driver_h(t, q, z, u_arr, nu, ell, (c_l, c_d), p, pools)
    return float(value), ControlPair(nu=nu, ell=ell)


def hamiltonian_batch(
    q: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
    c_l: np.ndarray,
    c_d: np.ndarray,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    iters: int = 60,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised Hamiltonian: returns (H, nu_hat, ell_hat) for a batch of states."""
    nu, ell = best_response_batch("exponential", q, c_l, c_d, z, u, p, pools, iters)
    value = driver_h(0.0, q, z, u, nu, ell, (c_l, c_d), p, pools)
    return np.asarray(value, dtype=float), nu, ell


# ---------------------------------------------------------------------------
# Compensation
# ---------------------------------------------------------------------------


def compensation_increment(
    H: np.ndarray,
    z: np.ndarray,
    u: np.ndarray,
    dW: np.ndarray,
    dN: np.ndarray,
    thetas: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One step of xi: -H dt + z dW + sum u (dN - theta dt)."""
    compensated = np.asarray(dN, dtype=float) - np.asarray(thetas) * dt
    return -np.asarray(H) * dt + np.asarray(z) * np.asarray(dW) + np.sum(
        np.asarray(u) * compensated, axis=-1
    )


def compensation_xi(
    path: PathRecord, y0: float, p: MarketParams, pools: Sequence[DarkPoolSpec]
) -> float:
    """Realised compensation along one recorded path.

    Args:
        path: Per-step record including Brownian increments and raw jump counts.
        y0: Initial certainty-equivalent value of the contract.
        p: Market parameters.
        pools: Dark pools, in the order of the recorded columns.

    Returns:
        xi = y0 - sum H dt + sum z dW + sum_i sum u_i (dN_i - theta_i dt).
    """
    if path.dW is None or path.dN is None:
        raise InvalidInputError("the path record must carry Brownian increments and jump counts")
    if path.dW.shape[0] != path.n_steps or path.dN.shape[0] != path.n_steps:
        raise InvalidInputError("increments do not match the number of recorded steps")
    H, _, _ = hamiltonian_batch(path.q, path.z, path.u, path.c_l, path.c_d, p, pools)
    thetas = np.array([pool.theta for pool in pools])
    increments = compensation_increment(H, path.z, path.u, path.dW, path.dN, thetas, path.dt)
    return float(y0 + increments.sum())


def participation_y0(R0: float, p: MarketParams) -> float:
    """Y0 making the participation constraint bind: -exp(-rho Ybar0) = R0."""
    if R0 >= 0:
        raise InvalidInputError("an exponential reservation utility must be negative")
    y_bar = -np.log(-R0) / p.rho
    return float(y_bar - p.X0 - p.Q0 * (p.S0 - p.alpha * p.Q0))
