"""Temporal pyramid encoder, query decoder and task heads.

Dense multi-head attention stands in for multi-scale deformable attention;
``DenseAttentionLayer`` is the swap point. A learnable per-head Gaussian bias on
the temporal distance between query and key keeps the locality that deformable
sampling around a reference point would give.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .substrate import FFN, MultiHeadAttention
from .viewembed import ViewDictionary, multi_level_inject, sinusoidal_encoding

SPAN_EPS = 1e-3
TIME_SCALE = 100.0


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(0.0, 1.0)
    return torch.log(x.clamp_min(eps) / (1.0 - x).clamp_min(eps))


def _groups(d: int) -> int:
    for g in (8, 4, 2, 1):
        if d % g == 0:
            return g
    return 1


# initial locality widths, one per head, spread geometrically over this range
LOCALITY_WIDTHS = (0.05, 0.4)


def _init_log_widths(heads: int) -> torch.Tensor:
    lo, hi = LOCALITY_WIDTHS
    if heads == 1:
        return torch.tensor([math.log(math.sqrt(lo * hi))], dtype=torch.float64)
    return torch.linspace(math.log(lo), math.log(hi), heads, dtype=torch.float64)


def locality_bias(t_q: torch.Tensor, t_k: torch.Tensor, log_width: torch.Tensor) -> torch.Tensor:
    """(heads, Tq, Tk) logit bias -((t_q - t_k) / width_h)^2."""
    diff = t_q[:, None] - t_k[None, :]
    return -(diff[None] / torch.exp(log_width)[:, None, None]) ** 2


@dataclass
class PyramidFeatures:
    levels: list[torch.Tensor]
    times: list[torch.Tensor]  # normalized position of every token, per level
    masks: list[torch.Tensor]  # True = valid
    view_alphas: list[torch.Tensor] = field(default_factory=list)


class BaseEncoder(nn.Module):
    """1x1 conv + GroupNorm, then stride-2 3-tap convs + GroupNorm; sine PE on every level."""

    def __init__(self, d_model: int, num_levels: int = 3):
        super().__init__()
        self.d_model = d_model
        self.num_levels = num_levels
        self.input_proj = nn.Sequential(nn.Conv1d(d_model, d_model, 1), nn.GroupNorm(_groups(d_model), d_model))
        self.down = nn.ModuleList(
            nn.Sequential(
                nn.Conv1d(d_model, d_model, 3, stride=2, padding=1, padding_mode="replicate"),
                nn.GroupNorm(_groups(d_model), d_model),
            )
            for _ in range(num_levels - 1)
        )

    def forward(
        self,
        z: torch.Tensor,
        times: torch.Tensor | None = None,
        dictionary: ViewDictionary | None = None,
    ) -> PyramidFeatures:
        k = z.shape[0]
        levels_used = self.num_levels
        while levels_used > 1 and k < 2 ** (levels_used - 1):
            levels_used -= 1
        if levels_used < self.num_levels:
            warnings.warn(f"sequence of length {k} too short for {self.num_levels} levels; using {levels_used}")
        if times is None:
            times = (torch.arange(k, dtype=z.dtype) + 0.5) / k
        x = self.input_proj(z.T.unsqueeze(0))
        feats, ts = [x], [times]
        for conv in self.down[: levels_used - 1]:
            x = conv(x)
            prev = ts[-1]
            # time of a stride-2 token: centre of the input frames it covers
            padded = torch.cat([prev[:1], prev, prev[-1:]]).reshape(1, 1, -1)
            ts.append(F.avg_pool1d(padded, 3, stride=2).reshape(-1)[: x.shape[-1]])
            feats.append(x)
        levels = [f.squeeze(0).T for f in feats]
        levels = [lv + sinusoidal_encoding(t * TIME_SCALE, self.d_model).to(lv.dtype) for lv, t in zip(levels, ts)]
        alphas: list[torch.Tensor] = []
        if dictionary is not None:
            levels, alphas = multi_level_inject(levels, dictionary)
        masks = [torch.ones(lv.shape[0], dtype=torch.bool) for lv in levels]
        return PyramidFeatures(levels, ts, masks, alphas)


class DenseAttentionLayer(nn.Module):
    """Post-norm self-attention + FFN block."""

    def __init__(self, d_model: int, heads: int, hidden: int):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads)
        self.log_width = nn.Parameter(_init_log_widths(heads))
        self.norm1 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, hidden)
        self.norm2 = nn.LayerNorm(d_model)

    def forward(self, x: torch.Tensor, pos: torch.Tensor, mask: torch.Tensor | None = None,
                times: torch.Tensor | None = None) -> torch.Tensor:
        qk = x + pos
        bias = None if times is None else locality_bias(times, times, self.log_width).to(x.dtype)
        x = self.norm1(x + self.attn(qk, qk, x, key_mask=mask, bias=bias))
        return self.norm2(x + self.ffn(x))


class TransformerEncoder(nn.Module):
    def __init__(self, d_model: int, heads: int, hidden: int, layers: int, num_levels: int):
        super().__init__()
        self.level_embed = nn.Parameter(torch.zeros(num_levels, d_model))
        self.layers = nn.ModuleList(DenseAttentionLayer(d_model, heads, hidden) for _ in range(layers))
        self.d_model = d_model

    def flatten(self, pyramid: PyramidFeatures) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        x = torch.cat(pyramid.levels, dim=0)
        times = torch.cat(pyramid.times)
        mask = torch.cat(pyramid.masks)
        lvl = torch.cat([self.level_embed[i].expand(lv.shape[0], -1) for i, lv in enumerate(pyramid.levels)])
        pos = sinusoidal_encoding(times * TIME_SCALE, self.d_model).to(x.dtype) + lvl
        return x, pos, mask, times

    def forward(self, pyramid: PyramidFeatures) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (memory, memory positional embedding, mask, token times)."""
        x, pos, mask, times = self.flatten(pyramid)
        for layer in self.layers:
            x = layer(x, pos, mask, times)
        return x, pos, mask, times


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, heads: int, hidden: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads)
        self.norm1 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, heads)
        self.log_width = nn.Parameter(_init_log_widths(heads))
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FFN(d_model, hidden)
        self.norm3 = nn.LayerNorm(d_model)

    def forward(self, tgt, query_pos, memory, memory_pos, memory_mask, reference=None, memory_times=None):
        q = tgt + query_pos
        tgt = self.norm1(tgt + self.self_attn(q, q, tgt))
        bias = None
        if reference is not None and memory_times is not None:
            bias = locality_bias(reference.detach(), memory_times, self.log_width).to(tgt.dtype)
        cross = self.cross_attn(tgt + query_pos, memory + memory_pos, memory, key_mask=memory_mask, bias=bias)
        tgt = self.norm2(tgt + cross)
        return self.norm3(tgt + self.ffn(tgt))


class SpanHead(nn.Module):
    """Small MLP -> (centre offset in logit space, length logit)."""

    def __init__(self, d_model: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, 2))

    def forward(self, x: torch.Tensor, reference: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.net(x)
        center = torch.sigmoid(inverse_sigmoid(reference) + out[:, 0])
        length = torch.sigmoid(out[:, 1]).clamp_min(SPAN_EPS)
        return center, length


def span_to_interval(center: torch.Tensor, length: torch.Tensor) -> torch.Tensor:
    """(N,) centre/length -> (N, 2) [t_st, t_ed] clipped to [0, 1]; t_st < t_ed whenever length > 0."""
    length = length.clamp_min(SPAN_EPS)
    st = (center - 0.5 * length).clamp_min(0.0)
    ed = (center + 0.5 * length).clamp_max(1.0)
    return torch.stack([st, ed], dim=-1)


@dataclass
class LayerOutput:
    spans: torch.Tensor  # (N, 2) t_st, t_ed
    fg_logits: torch.Tensor  # (N,)
    error_logits: torch.Tensor  # (N,)
    count_logits: torch.Tensor  # (N,) over event counts 1..N
    overall_logit: torch.Tensor  # ()
    references: torch.Tensor  # (N,) reference points used by this layer
    captions: tuple = ()  # caption slot kept empty

    @property
    def fg_scores(self) -> torch.Tensor:
        return torch.sigmoid(self.fg_logits)

    @property
    def error_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.error_logits)

    @property
    def count_probs(self) -> torch.Tensor:
        return torch.softmax(self.count_logits, dim=-1)


class TaskHeads(nn.Module):
    def __init__(self, d_model: int, n_queries: int):
        super().__init__()
        self.fg = nn.Linear(d_model, 1)
        self.error = nn.Linear(d_model, 1)
        self.count = nn.Linear(d_model, n_queries)
        self.overall = nn.Linear(d_model, 1)

    def forward(self, feats: torch.Tensor, spans: torch.Tensor, references: torch.Tensor) -> LayerOutput:
        pooled = feats.mean(dim=0)
        return LayerOutput(
            spans=spans,
            fg_logits=self.fg(feats).squeeze(-1),
            error_logits=self.error(feats).squeeze(-1),
            count_logits=self.count(pooled),
            overall_logit=self.overall(pooled).squeeze(-1),
            references=references,
        )


class QueryDecoder(nn.Module):
    def __init__(self, d_model: int, heads: int, hidden: int, layers: int, n_queries: int):
        super().__init__()
        self.n_queries = n_queries
        self.query_content = nn.Parameter(torch.empty(n_queries, d_model))
        self.query_pos = nn.Parameter(torch.empty(n_queries, d_model))
        with torch.no_grad():
            self.query_content.normal_(0.0, 1.0)
            self.query_pos.normal_(0.0, 1.0)
        self.ref_init = nn.Linear(d_model, 1)
        # per-query reference offsets, spread evenly over the timeline at init
        self.ref_logit = nn.Parameter(inverse_sigmoid((torch.arange(n_queries, dtype=torch.float64) + 0.5) / n_queries))
        self.ref_pos = nn.Sequential(nn.Linear(d_model, d_model), nn.ReLU(), nn.Linear(d_model, d_model))
        self.layers = nn.ModuleList(DecoderLayer(d_model, heads, hidden) for _ in range(layers))
        self.span_heads = nn.ModuleList(SpanHead(d_model) for _ in range(layers))
        self.d_model = d_model

    def forward(self, memory, memory_pos, memory_mask, ref_perturbation: torch.Tensor | None = None,
                memory_times: torch.Tensor | None = None):
        """Returns per-layer (features, centres, lengths, references)."""
        tgt = self.query_content
        reference = torch.sigmoid(self.ref_logit + self.ref_init(self.query_pos).squeeze(-1))
        outputs = []
        for i, (layer, span_head) in enumerate(zip(self.layers, self.span_heads)):
            if ref_perturbation is not None:
                reference = torch.sigmoid(inverse_sigmoid(reference) + ref_perturbation[i])
            pos = self.query_pos + self.ref_pos(sinusoidal_encoding(reference * TIME_SCALE, self.d_model).to(tgt.dtype))
            tgt = layer(tgt, pos, memory, memory_pos, memory_mask, reference, memory_times)
            center, length = span_head(tgt, reference)
            outputs.append((tgt, center, length, reference))
            reference = center.detach()
        return outputs


LENGTH_PRIOR_LOGIT = -2.0
FG_PRIOR = 0.1


class Detector(nn.Module):
    """Pyramid -> encoder -> decoder -> heads, one LayerOutput per decoder layer."""

    def __init__(self, d_model: int = 64, heads: int = 1, hidden: int = 64, levels: int = 3,
                 enc_layers: int = 2, dec_layers: int = 2, n_queries: int = 10):
        super().__init__()
        self.base = BaseEncoder(d_model, levels)
        self.encoder = TransformerEncoder(d_model, heads, hidden, enc_layers, levels)
        self.decoder = QueryDecoder(d_model, heads, hidden, dec_layers, n_queries)
        self.heads = TaskHeads(d_model, n_queries)

    def reset_head_priors(self) -> None:
        """Span heads start at their reference with short spans; fg logits start at a low prior."""
        n = self.decoder.n_queries
        with torch.no_grad():
            for head in self.decoder.span_heads:
                last = head.net[-1]
                last.weight.zero_()
                last.bias.copy_(torch.tensor([0.0, LENGTH_PRIOR_LOGIT]))
            self.heads.fg.bias.fill_(math.log(FG_PRIOR / (1.0 - FG_PRIOR)))
            self.decoder.ref_logit.copy_(inverse_sigmoid((torch.arange(n, dtype=torch.float64) + 0.5) / n))

    def forward(self, fused: torch.Tensor, times: torch.Tensor | None = None,
                dictionary: ViewDictionary | None = None) -> tuple[list[LayerOutput], PyramidFeatures]:
        pyramid = self.base(fused, times, dictionary)
        memory, memory_pos, mask, mem_times = self.encoder(pyramid)
        outs = []
        for feats, center, length, ref in self.decoder(memory, memory_pos, mask, memory_times=mem_times):
            outs.append(self.heads(feats, span_to_interval(center, length), ref))
        return outs, pyramid


@dataclass
class Event:
    query: int
    t_st: float
    t_ed: float
    fg_score: float
    error_prob: float


def inference_select(final: LayerOutput) -> list[Event]:
    """Keep the argmax-count highest-fg queries; ties broken by lower query index."""
    fg = final.fg_scores.detach()
    n = fg.shape[0]
    keep = min(int(torch.argmax(final.count_logits.detach())) + 1, n)
    order = torch.argsort(-fg, stable=True)[:keep]
    spans = final.spans.detach()
    err = final.error_probs.detach()
    return [
        Event(int(i), float(spans[i, 0]), float(spans[i, 1]), float(fg[i]), float(err[i]))
        for i in order.tolist()
    ]
