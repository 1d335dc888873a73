"""Set-prediction objective: matching, temporal GIoU, focal, count and error losses."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch.nn import functional as F

from .detector import SPAN_EPS, LayerOutput

PROB_EPS = 1e-8


@dataclass(frozen=True)
class GroundTruthEvent:
    t_st: float
    t_ed: float
    error: int = 0
    caption: str = ""

    def __post_init__(self):
        if not 0.0 <= self.t_st < self.t_ed <= 1.0:
            raise ValueError(f"invalid event span [{self.t_st}, {self.t_ed}]")


@dataclass
class LossConfig:
    alpha_giou: float = 2.0
    alpha_cls: float = 1.0
    beta_giou: float = 2.0
    beta_cls: float = 1.0
    beta_ec: float = 0.5
    beta_cap: float = 0.0
    lambda_imit: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lambda_sel: float = 0.02
    lambda_vic: float = 0.02
    lambda_ent: float = 0.02
    lambda_div: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")
        if self.beta_cap != 0.0:
            raise ValueError("caption loss is not implemented; beta_cap must be 0")


COMPONENTS = ("giou", "cls", "ec", "cap", "imit_fine", "imit_overall", "sel", "vic", "view_ent", "dict_div")


@dataclass
class LossReport:
    components: dict[str, float] = field(default_factory=dict)
    total: float = 0.0

    def line(self) -> str:
        parts = [f"{k}={v:.6g}" for k, v in self.components.items()]
        return f"total={self.total:.6g} " + " ".join(parts)


def weights_for(cfg: LossConfig) -> dict[str, float]:
    return {
        "giou": cfg.beta_giou,
        "cls": cfg.beta_cls,
        "ec": cfg.beta_ec,
        "cap": cfg.beta_cap,
        "imit_fine": cfg.lambda_imit,
        "imit_overall": cfg.lambda_imit,
        "sel": cfg.lambda_sel,
        "vic": cfg.lambda_vic,
        "view_ent": cfg.lambda_ent,
        "dict_div": cfg.lambda_div,
    }


def temporal_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU between (N, 2) and (M, 2) intervals -> (N, M)."""
    a = torch.as_tensor(a, dtype=torch.float64) if not torch.is_tensor(a) else a
    b = torch.as_tensor(b, dtype=a.dtype) if not torch.is_tensor(b) else b.to(a.dtype)
    a = a.reshape(-1, 2)
    b = b.reshape(-1, 2)
    a_st, a_ed = a[:, 0:1], torch.maximum(a[:, 1:2], a[:, 0:1] + SPAN_EPS)
    b_st, b_ed = b[:, 0].unsqueeze(0), torch.maximum(b[:, 1], b[:, 0] + SPAN_EPS).unsqueeze(0)
    inter = (torch.minimum(a_ed, b_ed) - torch.maximum(a_st, b_st)).clamp_min(0.0)
    union = (a_ed - a_st) + (b_ed - b_st) - inter
    enclosure = torch.maximum(a_ed, b_ed) - torch.minimum(a_st, b_st)
    iou = inter / union
    return iou - (enclosure - union) / enclosure


def focal_loss(p: torch.Tensor, target: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise binary focal loss on probabilities (clamped to [eps, 1 - eps])."""
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    target = torch.as_tensor(target, dtype=p.dtype)
    pos = -alpha * (1.0 - p).pow(gamma) * torch.log(p)
    neg = -(1.0 - alpha) * p.pow(gamma) * torch.log(1.0 - p)
    return target * pos + (1.0 - target) * neg


def matching_cost(out: LayerOutput, gt_spans: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """C_ij = alpha_giou (1 - GIoU) + alpha_cls * focal(p_i, foreground)."""
    giou = temporal_giou(out.spans, gt_spans)
    cls = focal_loss(out.fg_scores, torch.ones_like(out.fg_scores), cfg.focal_alpha, cfg.focal_gamma)
    return cfg.alpha_giou * (1.0 - giou) + cfg.alpha_cls * cls.unsqueeze(-1)


def hungarian(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost assignment of every column (GT) to a distinct row (query)."""
    c = np.asarray(cost.detach() if torch.is_tensor(cost) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = c.shape
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if n < m:
        raise ValueError(f"{n} queries cannot cover {m} ground-truth events; raise n_queries")
    if not np.isfinite(c).all():
        raise ValueError("matching cost contains non-finite entries")
    rows, cols = linear_sum_assignment(c)
    order = np.argsort(cols)
    return rows[order], cols[order]


def _span_tensor(gts: list[GroundTruthEvent], dtype=torch.float64) -> torch.Tensor:
    if not gts:
        return torch.zeros(0, 2, dtype=dtype)
    return torch.tensor([[g.t_st, g.t_ed] for g in gts], dtype=dtype)


def dvc_layer_loss(out: LayerOutput, gts: list[GroundTruthEvent], cfg: LossConfig):
    """Loss terms for one decoder layer; returns (dict of tensors, matched query rows)."""
    gt_spans = _span_tensor(gts, out.spans.dtype)
    n = out.fg_logits.shape[0]
    n_gt = len(gts)
    if n_gt:
        rows, cols = hungarian(matching_cost(out, gt_spans, cfg))
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
    target = torch.zeros(n, dtype=out.fg_logits.dtype)
    target[torch.as_tensor(rows, dtype=torch.long)] = 1.0
    cls = focal_loss(out.fg_scores, target, cfg.focal_alpha, cfg.focal_gamma).mean()
    if n_gt:
        matched = temporal_giou(out.spans[rows], gt_spans[cols]).diagonal()
        giou = (1.0 - matched).mean()
    else:
        giou = out.spans.sum() * 0.0
    bucket = min(max(n_gt, 1), n) - 1
    ec = -F.log_softmax(out.count_logits, dim=-1)[bucket]
    cap = out.fg_logits.sum() * 0.0
    return {"giou": giou, "cls": cls, "ec": ec, "cap": cap}, rows


def dvc_loss(layers: list[LayerOutput], gts: list[GroundTruthEvent], cfg: LossConfig):
    """Sum over decoder layers, matching recomputed per layer; returns (terms, final-layer rows)."""
    terms = {"giou": 0.0, "cls": 0.0, "ec": 0.0, "cap": 0.0}
    rows = np.zeros(0, dtype=np.int64)
    for out in layers:
        layer_terms, rows = dvc_layer_loss(out, gts, cfg)
        for k, v in layer_terms.items():
            terms[k] = terms[k] + v
    return terms, rows


def imit_fine_loss(matched_logits: torch.Tensor, labels) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=matched_logits.dtype)
    if labels.numel() == 0:
        return matched_logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(matched_logits, labels)


def imit_overall_loss(overall_logit: torch.Tensor, label) -> torch.Tensor:
    label = torch.as_tensor(float(label), dtype=overall_logit.dtype)
    return F.binary_cross_entropy_with_logits(overall_logit, label)


def total_loss(components: dict[str, torch.Tensor], cfg: LossConfig) -> tuple[torch.Tensor, LossReport]:
    w = weights_for(cfg)
    total = None
    for name in COMPONENTS:
        if name not in components:
            continue
        term = w[name] * components[name]
        total = term if total is None else total + term
    report = LossReport({k: float(v.detach()) for k, v in components.items()}, float(total.detach()))
    return total, report
