"""Scene-adaptive view embeddings from a shared prototype dictionary."""
from __future__ import annotations

import math
import warnings

import torch
from torch import nn

from .substrate import MultiHeadAttention

EPS = 1e-8


def sinusoidal_encoding(positions: torch.Tensor, d: int) -> torch.Tensor:
    """Sine/cosine absolute encoding evaluated at (possibly fractional) positions -> (len, d)."""
    positions = positions.to(torch.float64).reshape(-1, 1)
    half = (d + 1) // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) * 2.0 / d)
    angles = positions * freq
    pe = torch.empty(positions.shape[0], 2 * half, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe[:, :d]


def positional_table(t: int, d: int) -> torch.Tensor:
    return sinusoidal_encoding(torch.arange(t), d)


class ViewDictionary(nn.Module):
    """M x d prototype matrix attended under temperature tau."""

    def __init__(self, num_prototypes: int, d_model: int, tau: float = 1.0, heads: int = 1,
                 generator: torch.Generator | None = None):
        super().__init__()
        if num_prototypes < 2:
            raise ValueError("view dictionary needs M >= 2 prototypes")
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.M = num_prototypes
        self.tau = tau
        self.D = nn.Parameter(torch.empty(num_prototypes, d_model))
        with torch.no_grad():
            bound = 1.0 / math.sqrt(d_model)
            self.D.uniform_(-bound, bound, generator=generator)
        self.attn = MultiHeadAttention(d_model, heads)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (VE, alpha) where alpha is (T, M), averaged over heads."""
        return compute_view_embedding(z, self)


def compute_view_embedding(z: torch.Tensor, dictionary: ViewDictionary) -> tuple[torch.Tensor, torch.Tensor]:
    if dictionary.tau <= 0:
        raise ValueError(f"temperature must be positive, got {dictionary.tau}")
    q = z / dictionary.tau
    ve = dictionary.attn(q, dictionary.D, dictionary.D)
    alpha = dictionary.attn.attention_weights(q, dictionary.D).mean(dim=0)
    return ve, alpha


def inject(z: torch.Tensor, pe: torch.Tensor, ve: torch.Tensor) -> torch.Tensor:
    """Additive injection; ``pe`` must already be indexed by the frames' original positions."""
    if z.shape != pe.shape or z.shape != ve.shape:
        raise ValueError(f"inject shape mismatch: {tuple(z.shape)}, {tuple(pe.shape)}, {tuple(ve.shape)}")
    return z + pe + ve


def multi_level_inject(
    levels: list[torch.Tensor], dictionary: ViewDictionary
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Inject a fresh view embedding into every pyramid level; returns (levels, alphas)."""
    out, alphas = [], []
    for x in levels:
        ve, alpha = compute_view_embedding(x, dictionary)
        out.append(x + ve)
        alphas.append(alpha)
    return out, alphas


def view_entropy_loss(alpha: torch.Tensor, num_prototypes: int | None = None) -> torch.Tensor:
    """(1/log M) * mean_t KL(alpha_t || U_M); 0 for uniform rows, 1 for one-hot rows."""
    m = alpha.shape[-1] if num_prototypes is None else num_prototypes
    if m < 2:
        raise ValueError("view entropy needs M >= 2")
    a = alpha.reshape(-1, m)
    # xlogy gives 0 * log 0 = 0 exactly
    kl = (torch.special.xlogy(a, a).sum(dim=-1) + math.log(m))
    return kl.mean() / math.log(m)


def dict_diversity_loss(d: torch.Tensor) -> torch.Tensor:
    """||D_hat D_hat^T - I||_F^2 with l2-normalized rows."""
    norms = d.norm(dim=-1, keepdim=True)
    if bool((norms <= EPS).any()):
        warnings.warn("dictionary has a ~zero row; normalizing with an epsilon floor", RuntimeWarning)
    dh = d / norms.clamp_min(EPS)
    gram = dh @ dh.T
    eye = torch.eye(d.shape[0], dtype=d.dtype)
    return (gram - eye).pow(2).sum()


class FixedViewTokens(nn.Module):
    """Ablation: one learnable embedding per view, broadcast over time."""

    def __init__(self, d_model: int):
        super().__init__()
        self.exo = nn.Parameter(torch.zeros(d_model))
        self.ego = nn.Parameter(torch.zeros(d_model))

    def forward(self, z: torch.Tensor, view: str) -> torch.Tensor:
        token = self.ego if view == "ego" else self.exo
        return token.expand_as(z)
