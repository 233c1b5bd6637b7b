# Copyright © 2025 PI & Other Tales Inc.. All Rights Reserved.
"""Critic and actor networks of the fee designer.

Both take the exchange state (t, q, s, x, iota), scaled by the sampling box, as input.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

STATE_DIM = 5  # t, q, s, x, iota
OUTPUT_INIT = 3e-3


class ActorOutput(NamedTuple):
    """Fees and contract exposures for a batch of states."""

    c_l: torch.Tensor  # (B,)
    c_d: torch.Tensor  # (B, M)
    z: torch.Tensor  # (B,)
    u: torch.Tensor  # (B, M)

    def detach(self) -> ActorOutput:
        return ActorOutput(*(tensor.detach() for tensor in self))


def _init_hidden(layer: nn.Linear) -> None:
    nn.init.orthogonal_(layer.weight)
    nn.init.zeros_(layer.bias)


def _init_output(layer: nn.Linear) -> None:
    nn.init.uniform_(layer.weight, -OUTPUT_INIT, OUTPUT_INIT)
    nn.init.uniform_(layer.bias, -OUTPUT_INIT, OUTPUT_INIT)


class Critic(nn.Module):
    """Value network: three (Linear, BatchNorm1d, LeakyReLU) blocks and a linear output."""

    def __init__(self, state_scale: Sequence[float], hidden: int = 64) -> None:
        super().__init__()
        self.register_buffer("state_scale", torch.as_tensor(state_scale, dtype=torch.float32))
        layers = []
        width = STATE_DIM
        for _ in range(3):
            linear = nn.Linear(width, hidden)
            _init_hidden(linear)
            layers += [linear, nn.BatchNorm1d(hidden), nn.LeakyReLU()]
            width = hidden
        self.body = nn.Sequential(*layers)
        self.output = nn.Linear(hidden, 1)
        _init_output(self.output)

    def forward(self, state: torch.Tensor) -> torch.Tensor:
        return self.output(self.body(state / self.state_scale)).squeeze(-1)


class Actor(nn.Module):
    """Policy network with a two-layer shared base and one head per control.

    c_l and c_d are scaled sigmoids on [0, fee_cap], z is a bounded tanh and u a softplus.
    """

    def __init__(
        self,
        state_scale: Sequence[float],
        n_pools: int,
        hidden: int = 64,
        fee_cap: float = 0.01,
        z_bound: float = 1.0,
        u_beta: float = 0.1,
    ) -> None:
        super().__init__()
        self.register_buffer("state_scale", torch.as_tensor(state_scale, dtype=torch.float32))
        self.n_pools = n_pools
        self.fee_cap = fee_cap
        self.z_bound = z_bound
        self.u_beta = u_beta
        self.fc1 = nn.Linear(STATE_DIM, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        for layer in (self.fc1, self.fc2):
            _init_hidden(layer)
        self.lit_head = nn.Linear(hidden, 1)
        self.dark_head = nn.Linear(hidden, n_pools)
        self.z_head = nn.Linear(hidden, 1)
        self.u_head = nn.Linear(hidden, n_pools)
        for head in (self.lit_head, self.dark_head, self.z_head, self.u_head):
            _init_output(head)

    def forward(self, state: torch.Tensor) -> ActorOutput:
        base = F.leaky_relu(self.fc1(state / self.state_scale))
        base = F.leaky_relu(self.fc2(base))
        return ActorOutput(
            c_l=self.fee_cap * torch.sigmoid(self.lit_head(base)).squeeze(-1),
            c_d=self.fee_cap * torch.sigmoid(self.dark_head(base)),
            z=self.z_bound * torch.tanh(self.z_head(base)).squeeze(-1),
            u=F.softplus(self.u_head(base), beta=self.u_beta),
        )


@torch.no_grad()
def soft_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    """target <- (1 - tau) target + tau source, parameters and buffers alike."""
    for tgt, src in zip(target.parameters(), source.parameters()):
        tgt.mul_(1.0 - tau).add_(src, alpha=tau)
    for tgt, src in zip(target.buffers(), source.buffers()):
        if tgt.dtype.is_floating_point:
            tgt.mul_(1.0 - tau).add_(src, alpha=tau)
        else:
            tgt.copy_(src)
