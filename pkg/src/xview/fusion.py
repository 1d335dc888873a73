"""Bidirectional cross-attention fusion of the two view streams."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .substrate import MultiHeadAttention, sigmoid

FUSION_MODES = ("bix", "exo2ego", "ego2exo", "concat_channel", "concat_time", "average", "bix_deformable")


@dataclass
class FusionState:
    e_star: torch.Tensor | None
    x_star: torch.Tensor | None
    gamma_e: torch.Tensor | None
    gamma_x: torch.Tensor | None
    f_ego: torch.Tensor | None
    f_exo: torch.Tensor | None
    fused: torch.Tensor


class GatedMix(nn.Module):
    """gamma = sigmoid(W [z; retrieved]); F = (1 - gamma) z + gamma retrieved."""

    def __init__(self, d_model: int, granularity: str = "position"):
        super().__init__()
        if granularity not in ("position", "channel"):
            raise ValueError(f"unknown gate granularity {granularity!r}")
        self.granularity = granularity
        self.proj = nn.Linear(2 * d_model, 1 if granularity == "position" else d_model)

    def forward(self, z: torch.Tensor, retrieved: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return gated_mix(z, retrieved, self.proj)


def gated_mix(z: torch.Tensor, retrieved: torch.Tensor, proj: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    if z.shape != retrieved.shape:
        raise ValueError(f"gated_mix shape mismatch {tuple(z.shape)} vs {tuple(retrieved.shape)}")
    gamma = sigmoid(proj(torch.cat([z, retrieved], dim=-1)))
    return (1.0 - gamma) * z + gamma * retrieved, gamma


def fuse(f_ego: torch.Tensor, f_exo: torch.Tensor) -> torch.Tensor:
    if f_ego.shape != f_exo.shape:
        raise ValueError(
            f"cannot fuse streams of length {f_ego.shape[0]} and {f_exo.shape[0]}: "
            "set sampler k_ratio equal for both streams"
        )
    return 0.5 * (f_ego + f_exo)


class BidirectionalFusion(nn.Module):
    """Mutual retrieval between views with per-direction parameters.

    ``mode`` selects the full bidirectional block, one of its single-direction
    variants, or a concatenation / plain-average baseline. ``force_zero_gates``
    pins both gates to 0 for superset checks.
    """

    def __init__(self, d_model: int, heads: int = 1, mode: str = "bix", gate_granularity: str = "position"):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")
        if mode == "bix_deformable":
            raise NotImplementedError("deformable fusion is reserved and not implemented")
        self.mode = mode
        self.force_zero_gates = False
        self.exo_to_ego = MultiHeadAttention(d_model, heads)
        self.ego_to_exo = MultiHeadAttention(d_model, heads)
        self.gate_ego = GatedMix(d_model, gate_granularity)
        self.gate_exo = GatedMix(d_model, gate_granularity)
        # built for every mode so checkpoints stay interchangeable across modes
        self.channel_proj = nn.Linear(2 * d_model, d_model)

    def cross_attend(self, z_ego: torch.Tensor, z_exo: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(E*, X*): ego queries exo, exo queries ego."""
        if z_ego.shape[0] == 0 or z_exo.shape[0] == 0:
            raise ValueError("fusion needs two nonempty streams")
        e_star = self.exo_to_ego(z_ego, z_exo, z_exo)
        x_star = self.ego_to_exo(z_exo, z_ego, z_ego)
        return e_star, x_star

    def _mix(self, gate: GatedMix, z, retrieved, frozen: bool):
        if frozen or self.force_zero_gates:
            zeros = z.new_zeros(z.shape[0], 1 if gate.granularity == "position" else z.shape[1])
            return (1.0 - zeros) * z + zeros * retrieved, zeros
        return gate(z, retrieved)

    def forward(self, z_ego: torch.Tensor, z_exo: torch.Tensor) -> FusionState:
        if self.mode == "average":
            return FusionState(None, None, None, None, z_ego, z_exo, fuse(z_ego, z_exo))
        if self.mode == "concat_channel":
            if z_ego.shape[0] != z_exo.shape[0]:
                fuse(z_ego, z_exo)
            fused = self.channel_proj(torch.cat([z_ego, z_exo], dim=-1))
            return FusionState(None, None, None, None, None, None, fused)
        if self.mode == "concat_time":
            return FusionState(None, None, None, None, None, None, torch.cat([z_ego, z_exo], dim=0))
        e_star, x_star = self.cross_attend(z_ego, z_exo)
        f_ego, gamma_e = self._mix(self.gate_ego, z_ego, e_star, frozen=self.mode == "ego2exo")
        f_exo, gamma_x = self._mix(self.gate_exo, z_exo, x_star, frozen=self.mode == "exo2ego")
        return FusionState(e_star, x_star, gamma_e, gamma_x, f_ego, f_exo, fuse(f_ego, f_exo))
