"""Soft mixtures over agent contributions.

A gate sees every agent's contribution for a sample (channel-concatenated),
pushes it through a small MLP and softmax-normalizes the logits, so the
weights live on the probability simplex and the fused output is a convex
combination. The softmax also makes averaged gate weights directly readable
as "how much does each agent matter".
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import InvalidInputError
from .model import as_values
from .seeding import make_generator


@dataclass(frozen=True)
class GateOutput:
    weights: Tensor  # (N, A), rows on the simplex
    fused: Tensor  # shaped like one contribution


class GateNetwork(nn.Module):
    """Two-layer MLP: concat(A contributions) -> one logit per agent.

    The output layer starts at zero so a fresh gate mixes uniformly;
    identically behaving agents stay tied until gradients separate them.
    """

    def __init__(self, n_agents: int, in_width: int, hidden_width: int,
                 seed_parts=("gate", 0), dtype=torch.float64):
        super().__init__()
        if n_agents < 1:
            raise InvalidInputError("a gate needs at least one agent")
        self.n_agents = n_agents
        self.fc1 = nn.Linear(in_width, hidden_width, dtype=dtype)
        self.fc2 = nn.Linear(hidden_width, n_agents, dtype=dtype)
        g = make_generator(*seed_parts)
        self.fc1.weight.data = torch.randn(self.fc1.weight.shape, generator=g, dtype=dtype) / math.sqrt(in_width)
        self.fc1.bias.data.zero_()
        self.fc2.weight.data.zero_()
        self.fc2.bias.data.zero_()

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(torch.tanh(self.fc1(x)))


def moa_gate(inputs, gate: GateNetwork) -> GateOutput:
    """Fuse A equally shaped (N, C) matrices with learned per-sample weights."""
    mats = [as_values(x) for x in inputs]
    if not mats:
        raise InvalidInputError("moa_gate needs at least one input")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise InvalidInputError(f"agent contributions disagree in shape: {tuple(m.shape)} vs {tuple(shape)}")
    if len(mats) != gate.n_agents:
        raise InvalidInputError(f"gate expects {gate.n_agents} agents, got {len(mats)}")
    concat = torch.cat(mats, dim=-1)
    if concat.shape[-1] != gate.fc1.in_features:
        raise InvalidInputError(
            f"concatenated width {concat.shape[-1]} does not match gate input {gate.fc1.in_features}")
    weights = torch.softmax(gate(concat), dim=-1)
    fused = sum(weights[:, i: i + 1] * mats[i] for i in range(len(mats)))
    return GateOutput(weights, fused)


def fuse_average(inputs) -> Tensor:
    """Plain elementwise mean across agents."""
    mats = [as_values(x) for x in inputs]
    if not mats:
        raise InvalidInputError("fuse_average needs at least one input")
    shape = mats[0].shape
    for m in mats[1:]:
        if m.shape != shape:
            raise InvalidInputError("fuse_average inputs must share a shape")
    return torch.stack(mats).mean(dim=0)


def fuse_add_losses(per_agent_losses):
    """Sum of independently computed per-agent losses."""
    total = None
    for loss in per_agent_losses:
        total = loss if total is None else total + loss
    return torch.zeros((), dtype=torch.float64) if total is None else total
