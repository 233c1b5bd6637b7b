# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Market primitives: price, cash and inventory dynamics and the dark-pool fill law.

All functions accept scalars or numpy arrays and broadcast, so the simulator can advance
every Monte-Carlo path in one call. The liquidity available in pool i is
``r = A * exp(-k_c * c_d)`` where ``A`` follows the pool's size law shifted by
``support_eps``.
"""

from __future__ import annotations

import logging
from typing import Callable, Literal, Sequence, Union

import numpy as np
from scipy import integrate, special

from darkpool.configuration import DarkPoolSpec, MarketParams
from darkpool.errors import InvalidInputError
from darkpool.state import (
    ArrayOrFloat,
    ControlPair,
    ExchangeState,
    FeeDecision,
    FeeSchedule,
    TraderState,
)

logger = logging.getLogger(__name__)

Method = Literal["closed", "quadrature"]


def _out(value: np.ndarray) -> ArrayOrFloat:
    return float(value) if np.ndim(value) == 0 else value


def lit_price_step(
    s: ArrayOrFloat,
    nu: ArrayOrFloat,
    lam: ArrayOrFloat,
    dt: float,
    dW: ArrayOrFloat,
    p: MarketParams,
) -> ArrayOrFloat:
    """Advance the mid price by one Euler step of the permanent-impact dynamics."""
    if dt <= 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    s_next = (
        np.asarray(s, dtype=float)
        + (p.gamma * np.asarray(nu) + p.epsilon * np.asarray(lam)) * dt
        + p.sigma * np.asarray(dW)
    )
    return _out(s_next)


def executed_price(s: ArrayOrFloat, nu: ArrayOrFloat, p: MarketParams) -> ArrayOrFloat:
    """Price received on the lit venue after temporary impact."""
    return _out(np.asarray(s, dtype=float) + p.eta * np.asarray(nu))


def liquidity_factor(pool: DarkPoolSpec, c_d: ArrayOrFloat) -> np.ndarray:
    """Multiplicative shrink of the available liquidity caused by the dark fee."""
    return np.exp(-pool.k_c * np.asarray(c_d, dtype=float))


def _size_cdf(pool: DarkPoolSpec, y: np.ndarray) -> np.ndarray:
    z = np.maximum(y - pool.support_eps, 0.0)
    if pool.law == "uniform":
        return np.clip(z / (2.0 * pool.scale), 0.0, 1.0)
    return -np.expm1(-z / pool.scale)


def _size_pdf(pool: DarkPoolSpec, y: np.ndarray) -> np.ndarray:
    z = y - pool.support_eps
    if pool.law == "uniform":
        return np.where((z >= 0) & (z <= 2.0 * pool.scale), 0.5 / pool.scale, 0.0)
    return np.where(z >= 0, np.exp(-np.maximum(z, 0.0) / pool.scale) / pool.scale, 0.0)


def dark_liquidity_cdf(pool: DarkPoolSpec, c_d: ArrayOrFloat, x: ArrayOrFloat) -> ArrayOrFloat:
    """P(r <= x) = F_A(x * exp(k_c * c_d)).

    Args:
        pool: Dark pool specification.
        c_d: Dark fee.
        x: Share quantity, non-negative.

    Returns:
        The cumulative probability.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidInputError("dark_liquidity_cdf requires x >= 0")
    y = x * np.exp(pool.k_c * np.asarray(c_d, dtype=float))
    return _out(_size_cdf(pool, y))


def dark_liquidity_sf(pool: DarkPoolSpec, c_d: ArrayOrFloat, x: ArrayOrFloat) -> ArrayOrFloat:
    """P(r > x), computed directly so shallow pools keep a positive tail."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise InvalidInputError("dark_liquidity_sf requires x >= 0")
    y = x * np.exp(pool.k_c * np.asarray(c_d, dtype=float))
    z = np.maximum(y - pool.support_eps, 0.0)
    if pool.law == "uniform":
        return _out(np.clip(1.0 - z / (2.0 * pool.scale), 0.0, 1.0))
    return _out(np.exp(-z / pool.scale))


def dark_liquidity_pdf(pool: DarkPoolSpec, c_d: ArrayOrFloat, x: ArrayOrFloat) -> ArrayOrFloat:
    """Density of r at x: e^{k_c c_d} f_A(x e^{k_c c_d})."""
    inv_beta = np.exp(pool.k_c * np.asarray(c_d, dtype=float))
    return _out(_size_pdf(pool, np.asarray(x, dtype=float) * inv_beta) * inv_beta)


def sample_liquidity(
    pool: DarkPoolSpec,
    c_d: ArrayOrFloat,
    rng: np.random.Generator,
    size: Union[int, Sequence[int], None] = None,
) -> np.ndarray:
    """Draw the liquidity r available in the pool at an arrival."""
    if pool.law == "uniform":
        a = pool.support_eps + rng.uniform(0.0, 2.0 * pool.scale, size=size)
    else:
        a = pool.support_eps + rng.exponential(pool.scale, size=size)
    return a * liquidity_factor(pool, c_d)


def sample_dark_fill(
    pool: DarkPoolSpec, ell: ArrayOrFloat, c_d: ArrayOrFloat, rng: np.random.Generator
) -> ArrayOrFloat:
    """Executed volume min(ell, r) at one arrival."""
    ell = np.asarray(ell, dtype=float)
    if np.any(ell < 0):
        raise InvalidInputError("posted dark volume must be non-negative")
    size = np.broadcast(ell, np.asarray(c_d)).shape or None
    r = sample_liquidity(pool, c_d, rng, size=size)
    return _out(np.minimum(ell, r))


def _truncation(pool: DarkPoolSpec, ell: np.ndarray, c_d: np.ndarray):
    """Lower support r0 of r, scale s of r - r0 and standardised truncation point x."""
    beta = liquidity_factor(pool, c_d)
    r0 = beta * pool.support_eps
    s = beta * pool.scale
    gap = np.maximum(ell - r0, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(s > 0, gap / np.where(s > 0, s, 1.0), np.inf)
    return r0, s, x


def _quadrature_moment(
    pool: DarkPoolSpec, ell: float, c_d: float, g: Callable[[np.ndarray], np.ndarray]
) -> float:
    """E[g(min(ell, r))] by adaptive quadrature against the law of r."""
    beta = float(liquidity_factor(pool, c_d))
    if beta == 0.0:
        return float(g(np.asarray(0.0)))
    lo = beta * pool.support_eps
    tail = 1.0 - float(_size_cdf(pool, np.asarray(ell / beta)))
    if ell <= lo:
        return float(g(np.asarray(ell)))

    def integrand(r: float) -> float:
        return float(g(np.asarray(r)) * _size_pdf(pool, np.asarray(r / beta)) / beta)

    body, _ = integrate.quad(integrand, lo, ell, limit=200, epsabs=1e-13, epsrel=1e-11)
    return body + float(g(np.asarray(ell))) * tail


def exp_min_fill(pool: DarkPoolSpec, ell: ArrayOrFloat, c_d: ArrayOrFloat) -> ArrayOrFloat:
    """Expected executed volume E[min(ell, r)]."""
    ell = np.asarray(ell, dtype=float)
    c_d = np.asarray(c_d, dtype=float)
    if pool.law != "exponential":
        fn = np.vectorize(lambda e, c: _quadrature_moment(pool, e, c, lambda m: m))
        return _out(fn(ell, c_d))
    r0, s, x = _truncation(pool, ell, c_d)
    below = np.minimum(ell, r0)
    return _out(below + np.where(ell > r0, s * -np.expm1(-x), 0.0))


def exp_min_linear_moment(
    pool: DarkPoolSpec,
    ell: ArrayOrFloat,
    c_d: ArrayOrFloat,
    q: ArrayOrFloat,
    method: Method = "closed",
) -> ArrayOrFloat:
    """E[min(ell, r) * (2q - min(ell, r))].

    The exponential law is integrated in closed form by splitting on {r >= ell}: the tail
    contributes ell * (2q - ell) * (1 - F(ell e^{k c})) and the body is a truncated
    polynomial moment of an exponential variable.

    Args:
        pool: Dark pool specification.
        ell: Posted volume, 0 <= ell <= q.
        c_d: Dark fee.
        q: Current inventory.
        method: ``closed`` or ``quadrature``; other laws always use quadrature.

    Returns:
        The expectation, in [0, q^2].
    """
    ell = np.asarray(ell, dtype=float)
    q = np.asarray(q, dtype=float)
    c_d = np.asarray(c_d, dtype=float)
    if np.any(ell < 0):
        raise InvalidInputError("posted dark volume must be non-negative")
    if np.any(q < ell - 1e-12):
        raise InvalidInputError("exp_min_linear_moment requires q >= ell")

    if method == "quadrature" or pool.law != "exponential":
        fn = np.vectorize(
            lambda e, c, qq: _quadrature_moment(pool, e, c, lambda m: m * (2.0 * qq - m))
        )
        return _out(fn(ell, c_d, q))

    r0, s, x = _truncation(pool, ell, c_d)
    p0 = special.gammainc(1.0, x)
    m1 = s * special.gammainc(2.0, x)
    m2 = 2.0 * s * s * special.gammainc(3.0, x)
    body = (2.0 * q * r0 - r0 * r0) * p0 + (2.0 * q - 2.0 * r0) * m1 - m2
    tail = ell * (2.0 * q - ell) * np.exp(-x)
    return _out(np.where(ell > r0, body + tail, ell * (2.0 * q - ell)))


def exp_min_exponential_moment(
    pool: DarkPoolSpec,
    ell: ArrayOrFloat,
    c_d: ArrayOrFloat,
    q: ArrayOrFloat,
    rho: float,
    alpha: float,
    method: Method = "closed",
) -> ArrayOrFloat:
    """E[exp(-rho * alpha * min(ell, r) * (2q - min(ell, r)))].

    The body integral of the exponential law is a Gaussian-type integral, evaluated with
    Dawson's function so that every exponent stays non-positive.

    Returns:
        The expectation, in (0, 1].
    """
    ell = np.asarray(ell, dtype=float)
    q = np.asarray(q, dtype=float)
    c_d = np.asarray(c_d, dtype=float)
    if np.any(ell < 0):
        raise InvalidInputError("posted dark volume must be non-negative")
    if np.any(q < ell - 1e-12):
        raise InvalidInputError("exp_min_exponential_moment requires q >= ell")
    c = rho * alpha
    shape = np.broadcast(ell, q, c_d).shape
    if c == 0.0:
        return _out(np.ones(shape))

    if method == "quadrature" or pool.law != "exponential":
        fn = np.vectorize(
            lambda e, cc, qq: _quadrature_moment(
                pool, e, cc, lambda m: np.exp(-c * m * (2.0 * qq - m))
            )
        )
        return _out(fn(ell, c_d, q))

    r0, s, x = _truncation(pool, ell, c_d)

    def gain(m: np.ndarray) -> np.ndarray:
        return m * (2.0 * q - m)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lam = np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), np.inf)
        b = q + lam / (2.0 * c)
        sc = np.sqrt(c)
        upper = np.exp(-c * gain(ell) - x) * special.dawsn(sc * (ell - b))
        lower = np.exp(-c * gain(r0)) * special.dawsn(sc * (r0 - b))
        body = lam / sc * (upper - lower)
        # vanishing liquidity: all mass sits at r0
        body = np.where(np.isfinite(lam), body, np.exp(-c * gain(r0)))
    tail = np.exp(-c * gain(ell) - x)
    value = np.where(ell > r0, body + np.where(np.isfinite(x), tail, 0.0), np.exp(-c * gain(ell)))
    return _out(np.clip(value, np.finfo(float).tiny, 1.0))


def arrival_probability(
    pool: DarkPoolSpec, nu: ArrayOrFloat, k_theta: float, dt: float
) -> np.ndarray:
    """Probability of one arrival in a step of length dt, intensity theta e^{k_theta nu}."""
    return np.clip(pool.theta * np.exp(k_theta * np.asarray(nu, dtype=float)) * dt, 0.0, 1.0)


def step_state(
    state: TraderState,
    controls: ControlPair,
    fills: np.ndarray,
    c_l: ArrayOrFloat,
    lam: ArrayOrFloat,
    dt: float,
    dW: ArrayOrFloat,
    p: MarketParams,
) -> TraderState:
    """Advance (t, q, s, x) by one Euler step with the given dark fills.

    Args:
        state: State at the start of the step.
        controls: Lit rate and posted dark volumes.
        fills: Executed dark volume per pool, shape (..., M), each at most the posted volume.
        c_l: Lit fee.
        lam: Small-trader rate.
        dt: Step length.
        dW: Brownian increment of the price.
        p: Market parameters.

    Returns:
        The state at the end of the step.
    """
    fills = np.asarray(fills, dtype=float)
    ell = np.asarray(controls.ell, dtype=float)
    if np.any(fills > ell + 1e-12):
        raise InvalidInputError("a dark fill cannot exceed the posted volume")
    nu = np.asarray(controls.nu, dtype=float)
    s = np.asarray(state.s, dtype=float)
    total_fill = fills.sum(axis=-1)
    q_next = np.asarray(state.q) + nu * dt - total_fill
    x_next = (
        np.asarray(state.x)
        - ((s + p.eta * nu) * nu - np.asarray(c_l) * nu) * dt
        + s * total_fill
    )
    s_next = lit_price_step(s, nu, lam, dt, dW, p)
    return TraderState(
        t=_out(np.asarray(state.t) + dt), q=_out(q_next), s=s_next, x=_out(x_next)
    )


def exchange_pnl_step(
    state: ExchangeState,
    controls: ControlPair,
    fills: np.ndarray,
    fees: Union[FeeSchedule, FeeDecision],
    lam: ArrayOrFloat,
    dt: float,
    p: MarketParams,
) -> ArrayOrFloat:
    """Exchange revenue earned over one step: lit fees, dark fees and impact weight."""
    decision = fees if isinstance(fees, FeeDecision) else fees.decide(state)
    nu = np.asarray(controls.nu, dtype=float)
    c_l = np.asarray(decision.c_l, dtype=float).reshape(np.shape(nu))
    c_d = np.asarray(decision.c_d, dtype=float).reshape(np.shape(fills))
    increment = (
        -c_l * (nu + lam) * dt
        + np.sum(c_d * np.asarray(fills, dtype=float), axis=-1)
        + p.kappa * (p.gamma * nu + p.epsilon * np.asarray(lam)) * dt
    )
    return _out(increment)
