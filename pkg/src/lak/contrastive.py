"""Label-similarity weighted contrastive loss over in-batch document representations."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 1.0
    gamma: float = 0.1
    squared: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("contrastive temperature must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def label_similarity(Y: torch.Tensor) -> torch.Tensor:
    """Shared-positive counts ``Y Y^T`` for a binary ``[b, l]`` label matrix."""
    Y = Y.to(torch.float64) if not Y.is_floating_point() else Y
    return Y @ Y.T


def beta_coefficients(sim: torch.Tensor) -> torch.Tensor:
    """Row-normalize similarities over the other instances of the batch.

    Row ``i`` sums to 1 when instance ``i`` shares a label with anyone, else it
    is all zeros. The diagonal is always 0.
    """
    b = sim.shape[0]
    off = ~torch.eye(b, dtype=torch.bool, device=sim.device)
    sim = sim * off
    denom = sim.sum(1, keepdim=True)
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    return torch.where(denom > 0, sim / safe, torch.zeros_like(sim))


def pairwise_distance(Z: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Euclidean distances with a zero (not NaN) gradient where points coincide."""
    diff = Z[:, None, :] - Z[None, :, :]
    sq = (diff * diff).sum(-1)
    if squared:
        return sq
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def contrastive_loss(Z: torch.Tensor, Y: torch.Tensor, temperature: float = 1.0,
                     squared: bool = False) -> torch.Tensor:
    """Sum over anchors i and partners j != i of ``-beta_ij * log softmax_{k != i}(-d_ik / t)[j]``."""
    if temperature <= 0:
        raise ValueError("contrastive temperature must be > 0")
    b = Z.shape[0]
    if b < 2:
        return Z.sum() * 0.0
    beta = beta_coefficients(label_similarity(Y)).to(Z.dtype)
    eye = torch.eye(b, dtype=torch.bool, device=Z.device)
    logits = (-pairwise_distance(Z, squared) / temperature).masked_fill(eye, float("-inf"))
    log_prob = torch.log_softmax(logits, dim=1).masked_fill(eye, 0.0)
    return -(beta * log_prob).sum()


def total_loss(bce: torch.Tensor, con: torch.Tensor, gamma: float) -> torch.Tensor:
    return bce + gamma * con
