"""Align-fuse-detect pipeline for paired exo/ego feature sequences."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import Config
from .detector import Detector, LayerOutput
from .fusion import BidirectionalFusion, FusionState
from .sampler import AdaptiveSampler, selection_entropy_loss, vicreg_loss
from .substrate import init_uniform_
from .viewembed import FixedViewTokens, ViewDictionary, compute_view_embedding, dict_diversity_loss, positional_table, view_entropy_loss


@dataclass
class PipelineOutput:
    layers: list[LayerOutput]
    fusion: FusionState
    exo_indices: torch.Tensor
    ego_indices: torch.Tensor
    pre_sve: dict[str, torch.Tensor]  # gathered + PE, per view
    post_sve: dict[str, torch.Tensor]  # after view embedding
    regularizers: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


def uniform_indices(t: int, k: int) -> torch.Tensor:
    if k >= t:
        return torch.arange(t)
    return torch.round(torch.linspace(0, t - 1, k, dtype=torch.float64)).long()


class CrossViewDetector(nn.Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d, det = cfg.det.d_model, cfg.det
        self.sampler = AdaptiveSampler(d, det.heads, det.hidden, cfg.sampler.k_ratio, cfg.sampler.alpha, cfg.sampler.gumbel_temp)
        self.dictionary = ViewDictionary(cfg.sve.M, d, cfg.sve.tau, det.heads)
        self.fixed_tokens = FixedViewTokens(d)
        self.fusion = BidirectionalFusion(d, det.heads, cfg.fusion_mode(), cfg.fusion.gate_granularity)
        self.detector = Detector(d, det.heads, det.hidden, det.levels, det.enc_layers, det.dec_layers, det.n_queries)
        gen = torch.Generator().manual_seed(cfg.train.seed if seed is None else seed)
        init_uniform_(self, gen)
        with torch.no_grad():
            bound = 1.0 / d**0.5
            self.dictionary.D.uniform_(-bound, bound, generator=gen)
            self.detector.decoder.query_content.normal_(0.0, 1.0, generator=gen)
            self.detector.decoder.query_pos.normal_(0.0, 1.0, generator=gen)
        self.detector.reset_head_priors()
        with torch.no_grad():
            # matching content attends to itself from the start: W_k = W_q makes q.k a Gram form
            for attn in (self.fusion.exo_to_ego, self.fusion.ego_to_exo):
                attn.k_proj.weight.copy_(attn.q_proj.weight)
                attn.k_proj.bias.copy_(attn.q_proj.bias)
        self.double()

    def _view_embedding(self, z: torch.Tensor, view: str, alphas: list[torch.Tensor]) -> torch.Tensor:
        if not self.cfg.modules.sve:
            return torch.zeros_like(z)
        if self.cfg.sve.fixed_tokens:
            return self.fixed_tokens(z, view)
        ve, alpha = compute_view_embedding(z, self.dictionary)
        alphas.append(alpha)
        return ve

    def forward(self, z_exo: torch.Tensor, z_ego: torch.Tensor, generator: torch.Generator | None = None) -> PipelineOutput:
        cfg = self.cfg
        if cfg.modules.ego_only:
            z_exo = torch.zeros_like(z_exo)
        t_x, t_y = z_exo.shape[0], z_ego.shape[0]
        regs: dict[str, torch.Tensor] = {}
        if cfg.modules.adaptive_sampling:
            sel_exo, sel_ego = self.sampler(z_exo, z_ego, generator)
            idx_x, idx_y = sel_exo.indices, sel_ego.indices
            hat_x, hat_y = sel_exo.gathered, sel_ego.gathered
            regs["sel"] = selection_entropy_loss(sel_exo.soft, sel_ego.soft)
            regs["vic"] = vicreg_loss(hat_x, hat_y, cfg.sampler.gamma_var)
        else:
            k = min(t_x, t_y)
            idx_x, idx_y = uniform_indices(t_x, k), uniform_indices(t_y, k)
            hat_x, hat_y = z_exo[idx_x], z_ego[idx_y]

        d = z_exo.shape[1]
        pe_x = positional_table(t_x, d).to(z_exo.dtype)[idx_x]
        pe_y = positional_table(t_y, d).to(z_ego.dtype)[idx_y]
        alphas: list[torch.Tensor] = []
        ve_x = self._view_embedding(hat_x, "exo", alphas)
        ve_y = self._view_embedding(hat_y, "ego", alphas)
        pre = {"exo": hat_x + pe_x, "ego": hat_y + pe_y}
        tilde_x = hat_x + pe_x + ve_x
        tilde_y = hat_y + pe_y + ve_y

        state = self.fusion(tilde_y, tilde_x)
        times_y = (idx_y.to(z_ego.dtype) + 0.5) / t_y
        if self.fusion.mode == "concat_time":
            times = torch.cat([times_y, (idx_x.to(z_exo.dtype) + 0.5) / t_x])
        else:
            times = times_y
        use_levels = cfg.sve_dictionary_active() and cfg.sve.multi_level
        layers, pyramid = self.detector(state.fused, times, self.dictionary if use_levels else None)
        alphas.extend(pyramid.view_alphas)
        if cfg.sve_dictionary_active():
            regs["view_ent"] = view_entropy_loss(torch.cat(alphas, dim=0), cfg.sve.M)
            regs["dict_div"] = dict_diversity_loss(self.dictionary.D)
        return PipelineOutput(layers, state, idx_x, idx_y, pre, {"exo": tilde_x, "ego": tilde_y}, regs)
