"""Gated adaptive sampling of frame sequences.

Each view is scored per frame, a hard Top-K subset is taken (Gumbel-perturbed
while training), and the kept frames are scaled by a residual gate built from
soft inclusion scores so that the scorer receives gradient.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .substrate import FFN, MultiHeadAttention, check_finite

EPS = 1e-8


@dataclass
class SelectionResult:
    indices: torch.Tensor  # (K,) long, strictly increasing
    soft: torch.Tensor  # (T,)
    gate: torch.Tensor  # (T,)
    gathered: torch.Tensor  # (K, d)
    alpha: float


class ExoScorer(nn.Module):
    """Self-attention over the exo sequence, FFN, then a linear head to one score per frame."""

    def __init__(self, d_model: int, heads: int = 1, hidden: int = 64):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads)
        self.ffn = FFN(d_model, hidden)
        self.head = nn.Linear(d_model, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[0] == 0:
            raise ValueError("cannot score an empty sequence")
        h = self.attn(z, z, z)
        return self.head(self.ffn(h)).squeeze(-1)


class EgoScorer(nn.Module):
    """Ego frames attend to the sampled exo tokens; FFN and linear head give one score per frame."""

    def __init__(self, d_model: int, heads: int = 1, hidden: int = 64):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads)
        self.ffn = FFN(d_model, hidden)
        self.head = nn.Linear(d_model, 1)

    def forward(self, z_ego: torch.Tensor, sampled_exo: torch.Tensor) -> torch.Tensor:
        if sampled_exo.shape[0] == 0:
            raise ValueError("ego scoring needs a nonempty exo selection")
        if z_ego.shape[0] == 0:
            raise ValueError("cannot score an empty sequence")
        h = self.attn(z_ego, sampled_exo, sampled_exo)
        return self.head(self.ffn(h)).squeeze(-1)


def sample_gumbel(shape, generator: torch.Generator | None, dtype=torch.float64) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def relaxed_topk(keys: torch.Tensor, k: int) -> torch.Tensor:
    """Soft inclusion mass from k rounds of softmax with soft masking of chosen mass."""
    logits = keys
    total = torch.zeros_like(keys)
    for _ in range(k):
        p = torch.softmax(logits, dim=-1)
        total = total + p
        logits = logits + torch.log((1.0 - p).clamp_min(EPS))
    return total


def gumbel_topk(
    scores: torch.Tensor,
    k: int,
    temperature: float = 1.0,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (sorted hard indices, soft inclusion scores).

    In training mode the keys are ``scores + temperature * Gumbel(0, 1)``;
    in evaluation mode they are the raw scores. Hard indices carry no gradient.
    """
    t = scores.shape[0]
    if k < 1 or k > t:
        raise ValueError(f"K must satisfy 1 <= K <= T (got K={k}, T={t})")
    check_finite(scores, "gumbel_topk")
    keys = scores
    if training:
        keys = scores + temperature * sample_gumbel(scores.shape, generator, scores.dtype)
    # stable descending sort: ties go to the earlier frame
    hard = torch.sort(torch.argsort(-keys.detach(), stable=True)[:k]).values
    soft = relaxed_topk(keys, k)
    return hard, soft


def normalize_mean(s: torch.Tensor) -> torch.Tensor:
    m = s.mean()
    if float(m.detach()) <= EPS:
        warnings.warn("soft scores are all ~zero; Norm falls back to the epsilon floor", RuntimeWarning)
    return s / (m + EPS)


def residual_gate_and_gather(
    z: torch.Tensor, soft: torch.Tensor, indices: torch.Tensor, alpha: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """g = 1 + alpha * (Norm(s) - 1); returns (rows of g * z at indices, g)."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    gate = 1.0 + alpha * (normalize_mean(soft) - 1.0)
    gathered = (gate.unsqueeze(-1) * z)[torch.sort(indices).values]
    return gathered, gate


def select(
    z: torch.Tensor,
    scores: torch.Tensor,
    k: int,
    alpha: float,
    temperature: float = 1.0,
    training: bool = False,
    generator: torch.Generator | None = None,
) -> SelectionResult:
    idx, soft = gumbel_topk(scores, k, temperature, training, generator)
    gathered, gate = residual_gate_and_gather(z, soft, idx, alpha)
    return SelectionResult(idx, soft, gate, gathered, alpha)


def _stream_entropy(s: torch.Tensor) -> torch.Tensor:
    t = s.shape[0]
    if t < 2:
        return s.new_zeros(())
    p = s / s.sum().clamp_min(EPS)
    return (p * torch.log(p + EPS)).sum() / math.log(t)


def selection_entropy_loss(s_x: torch.Tensor, s_y: torch.Tensor) -> torch.Tensor:
    """Normalized negative entropy of both selection distributions; -2 at uniform, 0 at one-hot."""
    return _stream_entropy(s_x) + _stream_entropy(s_y)


def _vic_stream(z: torch.Tensor, gamma: float, eps: float) -> torch.Tensor:
    k, d = z.shape
    if k < 2:
        warnings.warn("VICReg needs at least two tokens per stream; contributing 0", RuntimeWarning)
        return z.new_zeros(())
    zc = z - z.mean(dim=0, keepdim=True)
    var = (zc * zc).sum(dim=0) / (k - 1)
    var_term = torch.relu(gamma - torch.sqrt(var + eps)).pow(2).mean()
    cov = zc.T @ zc / (k - 1)
    off = cov - torch.diag(torch.diagonal(cov))
    cov_term = off.pow(2).sum() / d
    return var_term + cov_term


def vicreg_loss(
    z_exo: torch.Tensor, z_ego: torch.Tensor, gamma: float = 1.0, eps: float = EPS
) -> torch.Tensor:
    return _vic_stream(z_exo, gamma, eps) + _vic_stream(z_ego, gamma, eps)


class AdaptiveSampler(nn.Module):
    """Both scorers plus the selection routine for one (exo, ego) pair."""

    def __init__(
        self,
        d_model: int,
        heads: int = 1,
        hidden: int = 64,
        k_ratio: float = 0.5,
        alpha: float = 0.5,
        gumbel_temp: float = 1.0,
    ):
        super().__init__()
        self.exo_scorer = ExoScorer(d_model, heads, hidden)
        self.ego_scorer = EgoScorer(d_model, heads, hidden)
        self.k_ratio = k_ratio
        self.alpha = alpha
        self.gumbel_temp = gumbel_temp

    def num_keep(self, t_exo: int, t_ego: int) -> int:
        return max(1, min(t_exo, t_ego, int(round(self.k_ratio * min(t_exo, t_ego)))))

    def forward(
        self,
        z_exo: torch.Tensor,
        z_ego: torch.Tensor,
        generator: torch.Generator | None = None,
        k: int | None = None,
    ) -> tuple[SelectionResult, SelectionResult]:
        if k is None:
            k = self.num_keep(z_exo.shape[0], z_ego.shape[0])
        r_exo = self.exo_scorer(z_exo)
        sel_exo = select(z_exo, r_exo, k, self.alpha, self.gumbel_temp, self.training, generator)
        r_ego = self.ego_scorer(z_ego, sel_exo.gathered)
        sel_ego = select(z_ego, r_ego, k, self.alpha, self.gumbel_temp, self.training, generator)
        return sel_exo, sel_ego
