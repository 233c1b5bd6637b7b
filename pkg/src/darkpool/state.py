# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Define the state, control and result structures."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

import numpy as np

from darkpool.errors import InvalidInputError

ArrayOrFloat = Union[float, np.ndarray]


@dataclass(frozen=True)
class TraderState:
    """Controlled state of the large trader: time, inventory, mid price, cash."""

    t: ArrayOrFloat
    q: ArrayOrFloat
    s: ArrayOrFloat
    x: ArrayOrFloat


@dataclass(frozen=True)
class ExchangeState(TraderState):
    """Trader state augmented with accumulated exchange revenue and continuation value."""

    iota: ArrayOrFloat = 0.0
    y: ArrayOrFloat = 0.0

    @classmethod
    def initial(cls, q0: float, s0: float, x0: float, y0: float = 0.0) -> ExchangeState:
        return cls(t=0.0, q=q0, s=s0, x=x0, iota=0.0, y=y0)


@dataclass(frozen=True)
class ControlPair:
    """Lit trading rate and per-pool posted dark volumes."""

    nu: ArrayOrFloat
    ell: np.ndarray

    def is_admissible(self, q: float, tol: float = 1e-12) -> bool:
        """Check nu <= 0, ell >= 0 and the posted total does not exceed q."""
        ell = np.asarray(self.ell, dtype=float)
        return bool(
            np.all(np.asarray(self.nu) <= tol)
            and np.all(ell >= -tol)
            and np.all(ell.sum(axis=-1) <= q + tol)
        )


@dataclass(frozen=True)
class AllocationResult:
    """Optimal dark allocation with its Lagrange multiplier."""

    ell: np.ndarray
    multiplier: float = 0.0
    iterations: int = 0

    @property
    def total(self) -> float:
        return float(np.sum(self.ell))


@dataclass(frozen=True)
class BsdeControls:
    """Contract parameters: initial value, diffusion and jump exposures."""

    y0: float
    z: float
    u: np.ndarray


@dataclass(frozen=True)
class FeeDecision:
    """Fees and contract exposures evaluated at a batch of states."""

    c_l: np.ndarray  # (n,)
    c_d: np.ndarray  # (n, M)
    z: np.ndarray  # (n,)
    u: np.ndarray  # (n, M)


class FeeSchedule:
    """Lit and dark fee functions of time and exchange state.

    Subclasses implement ``decide``; ``lit_fee`` and ``dark_fees`` are views on it.
    """

    n_pools: int = 1
    fee_cap: float = 0.01

    def decide(self, state: ExchangeState) -> FeeDecision:
        raise NotImplementedError

    def lit_fee(self, t: ArrayOrFloat, state: ExchangeState) -> np.ndarray:
        return self.decide(_at_time(t, state)).c_l

    def dark_fees(self, t: ArrayOrFloat, state: ExchangeState) -> np.ndarray:
        return self.decide(_at_time(t, state)).c_d


def _at_time(t: ArrayOrFloat, state: ExchangeState) -> ExchangeState:
    return ExchangeState(t=t, q=state.q, s=state.s, x=state.x, iota=state.iota, y=state.y)


class ConstantFeeSchedule(FeeSchedule):
    """Time- and state-independent fees with constant contract exposures."""

    def __init__(
        self,
        c_l: float,
        c_d: Union[float, List[float], np.ndarray],
        n_pools: int,
        z: float = 0.0,
        u: Union[float, List[float], np.ndarray] = 0.0,
        fee_cap: float = 0.01,
    ) -> None:
        self.n_pools = n_pools
        self.fee_cap = fee_cap
        self.c_l = float(c_l)
        self.c_d = np.broadcast_to(np.asarray(c_d, dtype=float), (n_pools,)).copy()
        self.z = float(z)
        self.u = np.broadcast_to(np.asarray(u, dtype=float), (n_pools,)).copy()
        if not 0.0 <= self.c_l <= fee_cap or np.any((self.c_d < 0) | (self.c_d > fee_cap)):
            raise InvalidInputError(f"fees must lie in [0, {fee_cap}]")

    def decide(self, state: ExchangeState) -> FeeDecision:
        n = np.size(np.asarray(state.q))
        return FeeDecision(
            c_l=np.full(n, self.c_l),
            c_d=np.tile(self.c_d, (n, 1)),
            z=np.full(n, self.z),
            u=np.tile(self.u, (n, 1)),
        )

    def contract(self, y0: float = 0.0) -> BsdeControls:
        """The schedule's constant exposures as a contract with initial value y0."""
        return BsdeControls(y0=float(y0), z=self.z, u=self.u.copy())


@dataclass
class PathRecord:
    """Per-step record of one simulated path, enough to rebuild the compensation."""

    t: np.ndarray  # (n,)
    q: np.ndarray  # (n,) inventory at step start
    s: np.ndarray
    x: np.ndarray
    nu: np.ndarray
    ell: np.ndarray  # (n, M)
    c_l: np.ndarray
    c_d: np.ndarray  # (n, M)
    z: np.ndarray
    u: np.ndarray  # (n, M)
    dW: Optional[np.ndarray]  # reference Brownian increments
    dN: Optional[np.ndarray]  # (n, M) jump counts
    dt: float = 1e-3

    @property
    def n_steps(self) -> int:
        return int(self.t.shape[0])


@dataclass
class PathMetrics:
    """Per-path outputs of a Monte-Carlo run, one array entry per path."""

    permanent_impact: np.ndarray
    terminal_inventory: np.ndarray
    lit_volume: np.ndarray
    dark_volume: np.ndarray  # (n_paths, M)
    compensation: np.ndarray
    exchange_pnl: np.ndarray
    terminal_cash: np.ndarray
    terminal_price: np.ndarray
    inventory_penalty: np.ndarray  # phi * integral of q^2
    clamp_events: np.ndarray
    initial_rate: np.ndarray
    trajectories: Dict[str, np.ndarray] = field(default_factory=dict)
    y0: float = 0.0

    @property
    def n_paths(self) -> int:
        return int(self.permanent_impact.shape[0])

    @property
    def exchange_objective(self) -> np.ndarray:
        return self.exchange_pnl - self.compensation


@dataclass(frozen=True)
class MinorEquilibrium:
    """Minor-player value coefficients, mean inventory and transported densities."""

    t: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    E: np.ndarray
    mu: np.ndarray
    A: np.ndarray  # h1 / (2 eta)
    B: np.ndarray  # h2 / eta
    Phi: np.ndarray
    psi: np.ndarray
    q_grid: np.ndarray
    m: np.ndarray  # (len(snapshot_t), n_q + 1)
    snapshot_t: np.ndarray
    E0: float = 0.0
    m0_std: float = 0.0

    def feedback_rate(self, n: int, q: ArrayOrFloat) -> ArrayOrFloat:
        """Minor trading rate at time index n: (h1 + 2 h2 q) / (2 eta) = A + B q."""
        return self.A[n] + self.B[n] * np.asarray(q)


@dataclass(frozen=True)
class MajorValue:
    """Major trader value on the (time x inventory) grid with its feedback controls."""

    t: np.ndarray
    q_grid: np.ndarray
    h0_grid: np.ndarray  # (n_time + 1, n_q + 1)
    nu0: np.ndarray  # (n_time + 1, n_q + 1)
    ell0: np.ndarray  # (n_time + 1, n_q + 1, M)
    b: np.ndarray  # (n_time + 1,)


@dataclass(frozen=True)
class MFGResult:
    """Converged competitive equilibrium."""

    minor: MinorEquilibrium
    major: MajorValue
    Q0bar: np.ndarray
    nu0_path: np.ndarray
    iterations: int
    residuals: List[float]


@dataclass
class State:
    """Pipeline state carried through the experiment graph."""

    subcommand: str = "simulate"
    spec: Optional[Any] = None  # ExperimentSpec
    results: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, Any] = field(default_factory=dict)  # name -> DataFrame
    artifacts: List[str] = field(default_factory=list)
    manifest: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None
