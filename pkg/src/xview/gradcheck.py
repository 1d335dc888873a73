"""Registry of finite-difference gradient checks for every differentiable building block."""
from __future__ import annotations

from typing import Callable

import torch

from .fusion import BidirectionalFusion, GatedMix
from .objective import focal_loss, imit_fine_loss, temporal_giou
from .sampler import relaxed_topk, residual_gate_and_gather, selection_entropy_loss, vicreg_loss
from .substrate import FFN, GradCheckReport, MultiHeadAttention, grad_check, init_uniform_
from .viewembed import ViewDictionary, compute_view_embedding, dict_diversity_loss, view_entropy_loss


def _randn(gen: torch.Generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=torch.float64)


def _module(m: torch.nn.Module, gen: torch.Generator) -> torch.nn.Module:
    return init_uniform_(m.double(), gen)


def check_attention(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    attn = _module(MultiHeadAttention(6, 2), g)
    return grad_check(lambda q, kv: attn(q, kv, kv), [_randn(g, 3, 6), _randn(g, 4, 6)], seed=seed)


def check_ffn(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    ffn = _module(FFN(5, 8), g)
    return grad_check(ffn, [_randn(g, 3, 5)], seed=seed)


def check_sampler_soft_path(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    z = _randn(g, 7, 3)
    idx = torch.sort(torch.randperm(7, generator=g)[:3]).values

    def f(r):
        return residual_gate_and_gather(z, relaxed_topk(r, 3), idx, 0.5)[0]

    return grad_check(f, [_randn(g, 7)], seed=seed)


def check_fusion_gates(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    block = _module(BidirectionalFusion(4, 2, "bix"), g)
    return grad_check(lambda e, x: block(e, x).fused, [_randn(g, 3, 4), _randn(g, 3, 4)], seed=seed)


def check_channel_gate(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    gate = _module(GatedMix(4, "channel"), g)
    return grad_check(lambda z, r: gate(z, r)[0], [_randn(g, 3, 4), _randn(g, 3, 4)], seed=seed)


def check_view_embedding(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    vd = ViewDictionary(3, 4, 0.7, 2, g).double()
    _module(vd.attn, g)
    return grad_check(lambda z: compute_view_embedding(z, vd)[0], [_randn(g, 3, 4)], seed=seed)


def check_giou(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    target = torch.sort(torch.rand(3, 2, generator=g, dtype=torch.float64), dim=-1).values

    def f(c, w):
        centre, half = torch.sigmoid(c), 0.05 + 0.4 * torch.sigmoid(w)
        return temporal_giou(torch.stack([centre - half, centre + half], dim=-1), target)

    return grad_check(f, [_randn(g, 4), _randn(g, 4)], seed=seed)


def check_focal(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    target = (torch.rand(5, generator=g) < 0.5).double()
    return grad_check(lambda x: focal_loss(torch.sigmoid(x), target), [_randn(g, 5)], seed=seed)


def check_selection_entropy(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    return grad_check(
        lambda a, b: selection_entropy_loss(torch.softmax(a, 0) * 3, torch.softmax(b, 0) * 2).reshape(1),
        [_randn(g, 6), _randn(g, 5)],
        seed=seed,
    )


def check_vicreg(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    return grad_check(lambda a, b: vicreg_loss(a, b).reshape(1), [_randn(g, 5, 3) * 0.6, _randn(g, 4, 3) * 0.6], seed=seed)


def check_view_entropy(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    return grad_check(lambda x: view_entropy_loss(torch.softmax(x, -1)).reshape(1), [_randn(g, 4, 5)], seed=seed)


def check_dict_diversity(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    return grad_check(lambda d: dict_diversity_loss(d).reshape(1), [_randn(g, 4, 3)], seed=seed)


def check_imitation_bce(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    labels = (torch.rand(4, generator=g) < 0.5).long().tolist()
    return grad_check(lambda x: imit_fine_loss(x, labels).reshape(1), [_randn(g, 4)], seed=seed)


def check_count_ce(seed: int) -> GradCheckReport:
    g = torch.Generator().manual_seed(seed)
    k = int(torch.randint(0, 6, (1,), generator=g))
    return grad_check(lambda x: -torch.log_softmax(x, -1)[k].reshape(1), [_randn(g, 6)], seed=seed)


CHECKS: dict[str, Callable[[int], GradCheckReport]] = {
    "attention": check_attention,
    "ffn": check_ffn,
    "sampler_soft_path": check_sampler_soft_path,
    "fusion_gates": check_fusion_gates,
    "channel_gate": check_channel_gate,
    "view_embedding": check_view_embedding,
    "giou": check_giou,
    "focal": check_focal,
    "selection_entropy": check_selection_entropy,
    "vicreg": check_vicreg,
    "view_entropy": check_view_entropy,
    "dict_diversity": check_dict_diversity,
    "imitation_bce": check_imitation_bce,
    "count_ce": check_count_ce,
}


def run_all(seeds: int = 20, tol: float = 1e-6) -> dict[str, float]:
    """Worst relative error per check across ``seeds`` seeds; NaN-free reports only."""
    worst = {}
    for name, fn in CHECKS.items():
        errs = []
        for s in range(seeds):
            rep = fn(s)
            errs.append(float("inf") if rep.diagnostic else rep.max_rel_error)
        worst[name] = max(errs)
    return worst
