# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Almgren-Chriss lit-only benchmark and the reservation utility it implies."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from darkpool.configuration import MarketParams
from darkpool.errors import InvalidInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BenchmarkResult:
    """Deterministic schedule with its reservation utility."""

    t: np.ndarray
    q: np.ndarray
    nu: np.ndarray
    R0: float  # Monte-Carlo estimate
    R0_se: float
    R0_exact: float  # Gaussian closed form
    log_neg_R0: float  # log(-R0_exact), finite even when R0 underflows

    def certainty_equivalent(self, rho: float) -> float:
        """Ybar0 with -exp(-rho Ybar0) = R0_exact."""
        return -self.log_neg_R0 / rho


def ac_schedule(p: MarketParams, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inventory and rate of the schedule minimising int(eta nu^2 + phi q^2) + alpha q_T^2.

    q(t) = Q0 (eta k cosh(k(T - t)) + alpha sinh(k(T - t))) / (eta k cosh(kT) + alpha sinh(kT))
    with k = sqrt(phi / eta), so that eta q'(T) + alpha q(T) = 0. With phi = 0 the schedule
    is linear.
    """
    T, eta, alpha, Q0 = p.T, p.eta, p.alpha, p.Q0
    if p.phi == 0:
        slope = -alpha * Q0 / (eta + alpha * T)
        return Q0 + slope * t, np.full_like(t, slope)
    k = np.sqrt(p.phi / eta)
    # hyperbolic terms rewritten with non-positive exponents
    plus, minus = eta * k + alpha, eta * k - alpha
    near = np.exp(-k * t)
    far = np.exp(-k * (2.0 * T - t))
    denom = plus + minus * np.exp(-2.0 * k * T)
    q = Q0 * (plus * near + minus * far) / denom
    nu = -k * Q0 * (plus * near - minus * far) / denom
    return q, nu


def _wealth_moments(p: MarketParams, t: np.ndarray, q: np.ndarray, nu: np.ndarray):
    """Mean and variance of the Gaussian terminal wealth of a deterministic schedule."""
    dt = np.diff(t)
    mid_q = q[:-1]
    rate = nu[:-1]
    drift = p.gamma * rate + p.epsilon * p.lambda_rate
    s_bar = p.S0 + np.concatenate([[0.0], np.cumsum(drift * dt)])
    cash = p.X0 - np.sum((s_bar[:-1] + p.eta * rate) * rate * dt)
    qT = q[-1]
    mean = cash + qT * (s_bar[-1] - p.alpha * qT) - p.phi * np.sum(mid_q**2 * dt)
    # the price noise enters as sigma * int q dW
    var = p.sigma**2 * np.sum(mid_q**2 * dt)
    return float(mean), float(var)


def almgren_chriss_benchmark(
    p: MarketParams,
    n_paths: int = 10_000,
    dt: float = 1e-3,
    seed: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> BenchmarkResult:
    """Execute the Almgren-Chriss schedule lit-only with zero fees and estimate R0.

    Args:
        p: Market parameters.
        n_paths: Monte-Carlo paths.
        dt: Time step.
        seed: Seed used when ``rng`` is not supplied.
        rng: Optional generator.

    Returns:
        The schedule on the time grid, R0 = E[-exp(-rho W_T)] with its standard error,
        and the closed form of the same expectation.
    """
    if n_paths < 2:
        raise InvalidInputError("the benchmark needs at least two paths")
    n_steps = max(int(round(p.T / dt)), 1)
    t = np.linspace(0.0, p.T, n_steps + 1)
    q, nu = ac_schedule(p, t)
    # the inventory path is taken from integrating the rate so q_T matches the cash flows
    q = np.concatenate([[p.Q0], p.Q0 + np.cumsum(nu[:-1] * np.diff(t))])

    mean, var = _wealth_moments(p, t, q, nu)
    log_neg_R0 = -p.rho * mean + 0.5 * p.rho**2 * var
    R0_exact = -float(np.exp(log_neg_R0))

    rng = rng or np.random.default_rng(seed)
    step = np.diff(t)
    dW = rng.standard_normal((n_paths, n_steps)) * np.sqrt(step)
    noise = p.sigma * (dW @ q[:-1])
    log_terms = -p.rho * (mean + noise)
    # E[-exp(x)] in log space: -exp(logsumexp(x) - log n)
    log_mean = special.logsumexp(log_terms) - np.log(n_paths)
    R0 = -float(np.exp(log_mean))
    rel = np.exp(log_terms - special.logsumexp(log_terms)) * n_paths
    R0_se = float(np.exp(log_mean) * rel.std(ddof=1) / np.sqrt(n_paths))
    logger.info(
        "Almgren-Chriss benchmark: R0=%.6g (se %.3g), closed form %.6g", R0, R0_se, R0_exact
    )
    return BenchmarkResult(
        t=t, q=q, nu=nu, R0=R0, R0_se=R0_se, R0_exact=R0_exact, log_neg_R0=float(log_neg_R0)
    )
