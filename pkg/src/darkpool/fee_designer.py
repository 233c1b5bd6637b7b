# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Actor-critic design of the exchange's fees and contract exposures.

The exchange value is reduced to v~(t, q, s, x, iota) with v~(T, .) = iota. The critic
approximates v~, the actor proposes (c_l, c_d, z, u), and both are trained on the
one-step Bellman residual of the reduced HJB. Critic derivatives are central finite
differences; expectations over the dark fill are Gauss-Legendre quadratures so the dark
fee stays differentiable.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch import nn

from darkpool.configuration import DarkPoolSpec, ExperimentSpec, MarketParams, TrainConfig
from darkpool.errors import ConfigurationError, NumericalError
from darkpool.networks import Actor, ActorOutput, Critic, soft_update
from darkpool.state import ExchangeState, FeeDecision, FeeSchedule
from darkpool.trader import allocate_batch, optimal_lit_rate_exp
from darkpool.utils import derive_seed, legendre_nodes

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1
T_, Q_, S_, X_, I_ = range(5)


@dataclass
class OperatorTerms:
    """Pieces of the reduced operator at a batch of states."""

    value: torch.Tensor
    d_iota: torch.Tensor
    d_q: torch.Tensor
    d_s: torch.Tensor
    d_x: torch.Tensor
    d_ss: torch.Tensor
    bracket: torch.Tensor
    jump: torch.Tensor
    nu_hat: torch.Tensor
    ell_hat: torch.Tensor
    one_sided: int = 0


@dataclass
class TrainingResult:
    """Trained networks with the per-epoch log."""

    critic: Critic
    target_critic: Critic
    actor: Actor
    log: pd.DataFrame
    held_out_start: float
    held_out_end: float
    one_sided: int


def state_box(p: MarketParams, cfg: TrainConfig) -> torch.Tensor:
    """Upper corner of the sampling box [0, T] x [0, Q] x [0, S] x [0, X] x [0, I]."""
    return torch.tensor([p.T, cfg.q_bar, cfg.s_bar, cfg.x_bar, cfg.i_bar], dtype=DTYPE)


def sample_states(
    p: MarketParams, cfg: TrainConfig, batch_size: int, generator: torch.Generator
) -> torch.Tensor:
    """Uniform batch from the sampling box, shape (batch_size, 5)."""
    box = state_box(p, cfg)
    return torch.rand(batch_size, 5, generator=generator, dtype=DTYPE) * box


def build_networks(
    p: MarketParams, pools: Sequence[DarkPoolSpec], cfg: TrainConfig
) -> Tuple[Critic, Critic, Actor]:
    """Fresh critic, its target copy and actor, in double precision."""
    scale = state_box(p, cfg).tolist()
    critic = Critic(scale, cfg.hidden).to(DTYPE)
    actor = Actor(scale, len(pools), cfg.hidden, p.fee_cap, cfg.z_bound, cfg.u_beta).to(DTYPE)
    target = copy.deepcopy(critic)
    for param in target.parameters():
        param.requires_grad_(False)
    return critic, target, actor


def best_response(
    states: torch.Tensor, controls: ActorOutput, p: MarketParams, pools: Sequence[DarkPoolSpec]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Exponential-utility trader's (nu, ell) at each state.

    With k_theta = 0 the lit rate is the closed form and stays differentiable in c_l. The
    allocation comes from the numerical solver and is treated as a constant.
    """
    q = states[:, Q_]
    q_np = q.detach().cpu().numpy()
    c_d_np = controls.c_d.detach().cpu().numpy()
    u_np = controls.u.detach().cpu().numpy()
    ell_np = allocate_batch("exponential", q_np, pools, c_d_np, p.rho, p.alpha, u_np)
    ell = torch.as_tensor(ell_np, dtype=states.dtype) * (q > 0).unsqueeze(-1)
    if p.k_theta == 0:
        nu = torch.clamp((controls.c_l - 2.0 * p.alpha * q) / (2.0 * p.eta), max=0.0)
    else:
        nu_np = optimal_lit_rate_exp(
            q_np, controls.c_l.detach().cpu().numpy(), u_np, p, ell_np, pools, c_d_np
        )
        nu = torch.as_tensor(np.asarray(nu_np), dtype=states.dtype)
    return torch.where(q > 0, nu, torch.zeros_like(nu)), ell


def _fill_law(
    pool: DarkPoolSpec, ell: torch.Tensor, c_d: torch.Tensor, n_nodes: int
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Quadrature of the law of min(ell, r): E[g] = sum w g(x) + tail g(ell)."""
    nodes, weights = legendre_nodes(n_nodes)
    nodes_t = torch.as_tensor(nodes, dtype=ell.dtype)
    weights_t = torch.as_tensor(weights, dtype=ell.dtype)
    beta = torch.exp(-pool.k_c * c_d)
    r0 = beta * pool.support_eps
    if pool.law == "uniform":
        top = torch.minimum(ell, beta * (pool.support_eps + 2.0 * pool.scale))
    else:
        top = ell
    span = torch.clamp(top - r0, min=0.0)
    x = torch.minimum(ell, r0).unsqueeze(-1) + span.unsqueeze(-1) * nodes_t
    standard = x / beta.unsqueeze(-1) - pool.support_eps
    gap = torch.clamp(ell / beta - pool.support_eps, min=0.0)
    if pool.law == "uniform":
        pdf = torch.ones_like(x) / (2.0 * pool.scale * beta.unsqueeze(-1))
        tail = torch.clamp(1.0 - gap / (2.0 * pool.scale), 0.0, 1.0)
    else:
        pdf = torch.exp(-torch.clamp(standard, min=0.0) / pool.scale) / (
            pool.scale * beta.unsqueeze(-1)
        )
        tail = torch.exp(-gap / pool.scale)
    return x, span.unsqueeze(-1) * weights_t * pdf, tail


def _critic_values(critic: nn.Module, states: torch.Tensor) -> torch.Tensor:
    shape = states.shape[:-1]
    return critic(states.reshape(-1, states.shape[-1])).reshape(shape)


def _finite_differences(
    critic: nn.Module, states: torch.Tensor, box: torch.Tensor, h: float
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor], int]:
    """Critic value and its first derivatives in (q, s, x, iota) plus d_ss.

    Central differences inside the box, one-sided where a shift would leave it.
    """
    shifts = []
    for k in (Q_, S_, X_, I_):
        for sign in (1.0, -1.0):
            shifted = states.clone()
            shifted[:, k] = shifted[:, k] + sign * h
            shifts.append(shifted)
    for sign in (2.0, -2.0):
        shifted = states.clone()
        shifted[:, S_] = shifted[:, S_] + sign * h
        shifts.append(shifted)
    values = _critic_values(critic, torch.stack([states, *shifts]))
    base = values[0]
    derivs: Dict[str, torch.Tensor] = {}
    one_sided = 0
    for j, (name, k) in enumerate((("q", Q_), ("s", S_), ("x", X_), ("iota", I_))):
        up, down = values[1 + 2 * j], values[2 + 2 * j]
        has_low = states[:, k] - h >= 0.0
        has_high = states[:, k] + h <= box[k]
        central = (up - down) / (2.0 * h)
        forward = (up - base) / h
        backward = (base - down) / h
        derivs[name] = torch.where(
            has_low & has_high, central, torch.where(has_low, backward, forward)
        )
        one_sided += int((~(has_low & has_high)).sum())
        if name == "s":
            up2, down2 = values[9], values[10]
            derivs["ss"] = torch.where(
                has_low & has_high,
                (up - 2.0 * base + down) / h**2,
                torch.where(
                    has_low, (base - 2.0 * down + down2) / h**2, (up2 - 2.0 * up + base) / h**2
                ),
            )
    return base, derivs, one_sided


def driver_bracket(
    states: torch.Tensor,
    controls: ActorOutput,
    nu: torch.Tensor,
    ell: torch.Tensor,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    n_nodes: int,
) -> torch.Tensor:
    """Trader driver term subtracted inside the reduced operator.

    -phi q^2 - eta nu^2 + c_l nu + q(eps lambda - 2 alpha nu) - rho (z + q sigma)^2 / 2
    - gamma nu z / sigma + sum_i (e^{-rho u} E[e^{-rho alpha m (2q - m)}] + rho u - 1)
    e^{k nu} theta / rho.
    """
    q = states[:, Q_]
    z = controls.z
    value = (
        -p.phi * q**2
        - p.eta * nu**2
        + controls.c_l * nu
        + q * (p.epsilon * p.lambda_rate - 2.0 * p.alpha * nu)
        - 0.5 * p.rho * (z + q * p.sigma) ** 2
    )
    if p.sigma > 0:
        value = value - p.gamma * nu * z / p.sigma
    intensity = torch.exp(p.k_theta * nu)
    for i, pool in enumerate(pools):
        ell_i = ell[:, i]
        x, w, tail = _fill_law(pool, ell_i, controls.c_d[:, i], n_nodes)
        qq = q.unsqueeze(-1)
        moment = (w * torch.exp(-p.rho * p.alpha * x * (2.0 * qq - x))).sum(-1) + tail * torch.exp(
            -p.rho * p.alpha * ell_i * (2.0 * q - ell_i)
        )
        u_i = controls.u[:, i]
        value = value + (torch.exp(-p.rho * u_i) * moment + p.rho * u_i - 1.0) * (
            intensity * pool.theta / p.rho
        )
    return value


def _jump_term(
    critic: nn.Module,
    states: torch.Tensor,
    base: torch.Tensor,
    controls: ActorOutput,
    nu: torch.Tensor,
    ell: torch.Tensor,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    n_nodes: int,
) -> torch.Tensor:
    """sum_i theta_i e^{k nu} E[v(t, q - m, s, x + s m, iota + c_d m) - v]."""
    total = torch.zeros_like(base)
    intensity = torch.exp(p.k_theta * nu)
    for i, pool in enumerate(pools):
        ell_i = ell[:, i]
        x, w, tail = _fill_law(pool, ell_i, controls.c_d[:, i], n_nodes)
        fills = torch.cat([x, ell_i.unsqueeze(-1)], dim=-1)  # (B, K + 1)
        probs = torch.cat([w, tail.unsqueeze(-1)], dim=-1)
        moved = states.unsqueeze(1).expand(-1, fills.shape[1], -1).clone()
        moved[..., Q_] = moved[..., Q_] - fills
        moved[..., X_] = moved[..., X_] + moved[..., S_] * fills
        moved[..., I_] = moved[..., I_] + controls.c_d[:, i].unsqueeze(-1) * fills
        gain = _critic_values(critic, moved) - base.unsqueeze(-1)
        total = total + pool.theta * intensity * (probs * gain).sum(-1)
    return total


def evaluate_operator(
    states: torch.Tensor,
    controls: ActorOutput,
    critic: nn.Module,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    cfg: TrainConfig,
) -> OperatorTerms:
    """Reduced operator applied to the critic at a batch of states.

    Args:
        states: Batch (B, 5) of (t, q, s, x, iota).
        controls: Fees and exposures at each state.
        critic: Value network, evaluated as a pure function of its input.
        p: Market parameters.
        pools: Dark pools.
        cfg: Training configuration (finite-difference step, quadrature nodes, box).

    Returns:
        The operator value with its components.
    """
    box = state_box(p, cfg).to(states.dtype)
    nu, ell = best_response(states, controls, p, pools)
    base, d, one_sided = _finite_differences(critic, states, box, cfg.fd_step)
    s = states[:, S_]
    lam = p.lambda_rate
    impact = p.gamma * nu + p.epsilon * lam
    drift = (
        (-controls.c_l * (nu + lam) + p.kappa * impact) * d["iota"]
        + nu * d["q"]
        + impact * d["s"]
        - ((s + p.eta * nu) * nu - controls.c_l * nu) * d["x"]
        + 0.5 * p.sigma**2 * d["ss"]
    )
    bracket = driver_bracket(states, controls, nu, ell, p, pools, cfg.quad_nodes)
    jump = _jump_term(critic, states, base, controls, nu, ell, p, pools, cfg.quad_nodes)
    if one_sided:
        logger.debug("%d one-sided differences at the sampling-box boundary", one_sided)
    return OperatorTerms(
        value=drift - bracket + jump,
        d_iota=d["iota"], d_q=d["q"], d_s=d["s"], d_x=d["x"], d_ss=d["ss"],
        bracket=bracket, jump=jump, nu_hat=nu, ell_hat=ell, one_sided=one_sided,
    )


def critic_loss(
    states: torch.Tensor,
    critic: nn.Module,
    target_critic: nn.Module,
    actor: nn.Module,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    cfg: TrainConfig,
    refresh_stats: bool = True,
) -> Tuple[torch.Tensor, OperatorTerms]:
    """Mean squared Bellman residual against targets built from the target network.

    y = v_tgt(t + dt, .) + F[v](t, .) dt, with v_tgt replaced by iota once t + dt >= T. A
    terminal-slice residual (v(T, .) - iota)^2 is added with weight ``terminal_weight``.

    Targets, predictions and the terminal slice all use the normalisation statistics held
    by the critic; with ``refresh_stats`` those are first updated from the interior batch.
    """
    if refresh_stats:
        critic.train()
        with torch.no_grad():
            critic(states)
    critic.eval()
    target_critic.eval()
    with torch.no_grad():
        controls = actor(states)
        terms = evaluate_operator(states, controls, critic, p, pools, cfg)
        shifted = states.clone()
        shifted[:, T_] = shifted[:, T_] + cfg.dt
        next_value = torch.where(
            shifted[:, T_] >= p.T, states[:, I_], target_critic(shifted)
        )
        y = next_value + terms.value * cfg.dt
    loss = torch.mean((critic(states) - y) ** 2)
    if cfg.terminal_weight > 0:
        terminal = states.clone()
        terminal[:, T_] = p.T
        loss = loss + cfg.terminal_weight * torch.mean((critic(terminal) - states[:, I_]) ** 2)
    return loss, terms


def actor_loss(
    states: torch.Tensor,
    critic: nn.Module,
    actor: nn.Module,
    p: MarketParams,
    pools: Sequence[DarkPoolSpec],
    cfg: TrainConfig,
) -> Tuple[torch.Tensor, OperatorTerms]:
    """-mean F[v] under the actor's controls; the critic is frozen."""
    critic.eval()
    flags = [param.requires_grad for param in critic.parameters()]
    for param in critic.parameters():
        param.requires_grad_(False)
    try:
        terms = evaluate_operator(states, actor(states), critic, p, pools, cfg)
        loss = -terms.value.mean()
    finally:
        for param, flag in zip(critic.parameters(), flags):
            param.requires_grad_(flag)
    return loss, terms


def _held_out_loss(critic, target, actor, states, p, pools, cfg) -> float:
    with torch.no_grad():
        loss, _ = critic_loss(states, critic, target, actor, p, pools, cfg, refresh_stats=False)
    return float(loss)


def train(
    spec: ExperimentSpec,
    epochs: Optional[int] = None,
    log_every: int = 1000,
) -> TrainingResult:
    """Run the actor-critic epoch loop.

    Every epoch draws a fresh batch. The critic steps every ``critic_period`` epochs, the
    actor every ``actor_period`` and the target network is softly updated every
    ``target_period``.

    Args:
        spec: Validated experiment; its scenario selects the dark pools.
        epochs: Optional override of ``spec.train.epochs``.
        log_every: Epochs between progress lines.

    Returns:
        The trained networks and a log with columns (epoch, L_v, L_pi).

    Raises:
        NumericalError: When a loss becomes NaN or infinite.
    """
    p, cfg = spec.market, spec.train
    pools = spec.scenario_pools()
    n_epochs = cfg.epochs if epochs is None else epochs
    torch.manual_seed(cfg.seed)
    critic, target, actor = build_networks(p, pools, cfg)
    critic_opt = torch.optim.Adam(
        critic.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    actor_opt = torch.optim.Adam(
        actor.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8
    )
    batches = torch.Generator().manual_seed(derive_seed(cfg.seed, "batches"))
    held_out = sample_states(
        p, cfg, cfg.batch_size, torch.Generator().manual_seed(derive_seed(cfg.seed, "held-out"))
    )
    start = _held_out_loss(critic, target, actor, held_out, p, pools, cfg)
    logger.info(
        "Training fee designer: %d pools, %d epochs, batch %d, lr %.1e",
        len(pools), n_epochs, cfg.batch_size, cfg.learning_rate,
    )

    rows = []
    one_sided = 0
    for epoch in range(n_epochs):
        states = sample_states(p, cfg, cfg.batch_size, batches)
        l_v = l_pi = float("nan")
        if epoch % cfg.critic_period == 0:
            critic_opt.zero_grad()
            loss, terms = critic_loss(states, critic, target, actor, p, pools, cfg)
            loss.backward()
            critic_opt.step()
            l_v = float(loss.detach())
            one_sided += terms.one_sided
        if epoch % cfg.actor_period == 0:
            actor_opt.zero_grad()
            loss, _ = actor_loss(states, critic, actor, p, pools, cfg)
            loss.backward()
            actor_opt.step()
            l_pi = float(loss.detach())
        if epoch % cfg.target_period == 0:
            soft_update(target, critic, cfg.tau)
        for name, value, ran in (
            ("critic", l_v, epoch % cfg.critic_period == 0),
            ("actor", l_pi, epoch % cfg.actor_period == 0),
        ):
            if ran and not np.isfinite(value):
                raise NumericalError(f"training diverged at epoch {epoch}: {name} loss {value}")
        rows.append({"epoch": epoch, "L_v": l_v, "L_pi": l_pi})
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("Epoch %d: L_v=%.4e L_pi=%.4e", epoch + 1, l_v, l_pi)

    end = _held_out_loss(critic, target, actor, held_out, p, pools, cfg)
    logger.info("Held-out critic loss %.4e -> %.4e", start, end)
    critic.eval()
    actor.eval()
    return TrainingResult(
        critic=critic,
        target_critic=target,
        actor=actor,
        log=pd.DataFrame(rows, columns=["epoch", "L_v", "L_pi"]),
        held_out_start=start,
        held_out_end=end,
        one_sided=one_sided,
    )


class ActorFeeSchedule(FeeSchedule):
    """Fee schedule read off a trained actor."""

    def __init__(self, actor: Actor) -> None:
        self.actor = actor.eval()
        self.n_pools = actor.n_pools
        self.fee_cap = actor.fee_cap

    def decide(self, state: ExchangeState) -> FeeDecision:
        columns = np.broadcast_arrays(
            *(np.atleast_1d(np.asarray(v, dtype=float))
              for v in (state.t, state.q, state.s, state.x, state.iota))
        )
        states = torch.as_tensor(np.stack(columns, axis=-1), dtype=DTYPE)
        with torch.no_grad():
            out = self.actor(states)
        return FeeDecision(
            c_l=out.c_l.numpy(), c_d=out.c_d.numpy(), z=out.z.numpy(), u=out.u.numpy()
        )


def extract_fee_schedule(actor: Actor) -> ActorFeeSchedule:
    """Wrap a trained actor as the fee schedule consumed by the simulator."""
    return ActorFeeSchedule(actor)


def save_checkpoint(
    path: Union[str, Path], critic: Critic, actor: Actor, spec: ExperimentSpec
) -> Path:
    """Write both networks and the settings needed to rebuild them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = spec.train
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "critic": critic.state_dict(),
            "actor": actor.state_dict(),
            "state_scale": state_box(spec.market, cfg).tolist(),
            "n_pools": actor.n_pools,
            "hidden": cfg.hidden,
            "fee_cap": actor.fee_cap,
            "z_bound": actor.z_bound,
            "u_beta": actor.u_beta,
        },
        path,
    )
    logger.info("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Critic, Actor]:
    """Rebuild the critic and actor saved by ``save_checkpoint``."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    payload: Dict[str, Any] = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}"
        )
    critic = Critic(payload["state_scale"], payload["hidden"]).to(DTYPE)
    actor = Actor(
        payload["state_scale"], payload["n_pools"], payload["hidden"],
        payload["fee_cap"], payload["z_bound"], payload["u_beta"],
    ).to(DTYPE)
    critic.load_state_dict(payload["critic"])
    actor.load_state_dict(payload["actor"])
    return critic.eval(), actor.eval()
