"""Dense tensor building blocks on top of torch autograd.

Every learned module in the package is assembled from the pieces here:
finite-input guards, softmax, multi-head attention, a two-layer FFN, a
seeded uniform initializer and a central-difference gradient checker that
is independent of autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import nn

__all__ = [
    "NonFiniteError",
    "check_finite",
    "matmul",
    "softmax",
    "sigmoid",
    "mean_pool",
    "MultiHeadAttention",
    "FFN",
    "init_uniform_",
    "GradCheckReport",
    "grad_check",
]


class NonFiniteError(ValueError):
    """Raised when NaN/Inf reaches an operation boundary."""


def check_finite(x: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values entering '{name}'")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    check_finite(a, "matmul")
    check_finite(b, "matmul")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    check_finite(x, "softmax")
    shifted = x - x.max(dim=axis, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def masked_softmax(x: torch.Tensor, mask: torch.Tensor | None, axis: int = -1) -> torch.Tensor:
    """Softmax where ``mask`` (True = keep) zeroes excluded entries exactly."""
    if mask is None:
        return softmax(x, axis)
    check_finite(x, "softmax")
    neg = torch.finfo(x.dtype).min
    filled = x.masked_fill(~mask, neg)
    shifted = filled - filled.max(dim=axis, keepdim=True).values.detach()
    e = shifted.exp() * mask
    return e / e.sum(dim=axis, keepdim=True).clamp_min(torch.finfo(x.dtype).tiny)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    check_finite(x, "sigmoid")
    return torch.sigmoid(x)


def mean_pool(x: torch.Tensor, axis: int = 0) -> torch.Tensor:
    check_finite(x, "mean_pool")
    return x.mean(dim=axis)


def init_uniform_(module: nn.Module, generator: torch.Generator | None = None) -> nn.Module:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every Linear/Conv1d weight and bias."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv1d)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
    return module


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head scale 1/sqrt(d/heads), no dropout.

    ``forward(q, k, v)`` takes (Tq, d), (Tk, d), (Tk, d) and returns (Tq, d).
    Self-attention is the q = k = v case.
    """

    def __init__(self, d_model: int, heads: int = 1, bias: bool = True):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
        self.d_model = d_model
        self.heads = heads
        self.head_dim = d_model // heads
        self.q_proj = nn.Linear(d_model, d_model, bias=bias)
        self.k_proj = nn.Linear(d_model, d_model, bias=bias)
        self.v_proj = nn.Linear(d_model, d_model, bias=bias)
        self.out_proj = nn.Linear(d_model, d_model, bias=bias)
        self.last_weights: torch.Tensor | None = None

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        return x.reshape(x.shape[0], self.heads, self.head_dim).transpose(0, 1)

    def attention_weights(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        logits = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            logits = logits + bias
        mask = None if key_mask is None else key_mask.reshape(1, 1, -1)
        return masked_softmax(logits, mask, axis=-1)

    def forward(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        bias: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """``bias`` is added to the logits and broadcasts against (heads, Tq, Tk)."""
        if q.shape[-1] != self.d_model or k.shape[-1] != self.d_model or v.shape[-1] != self.d_model:
            raise ValueError("attention inputs must have feature size d_model")
        if k.shape[0] != v.shape[0]:
            raise ValueError("keys and values must have the same length")
        if k.shape[0] == 0:
            raise ValueError("attention needs at least one key")
        check_finite(q, "attention.q")
        check_finite(k, "attention.k")
        check_finite(v, "attention.v")
        w = self.attention_weights(q, k, key_mask, bias)
        self.last_weights = w.detach()
        vh = self._split(self.v_proj(v))
        out = (w @ vh).transpose(0, 1).reshape(q.shape[0], self.d_model)
        return self.out_proj(out)


class FFN(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, d_in if d_out is None else d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_finite(x, "ffn")
        return self.fc2(torch.relu(self.fc1(x)))


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tol: float = 1e-6
    diagnostic: str = ""

    @property
    def passed(self) -> bool:
        return not self.diagnostic and self.max_rel_error <= self.tol


def _anomaly_node(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor]) -> str:
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    try:
        with torch.autograd.detect_anomaly(check_nan=True):
            out = fn(*xs)
            if not torch.isfinite(out).all():
                return f"forward output non-finite (grad_fn={type(out.grad_fn).__name__})"
            out.sum().backward()
    except NonFiniteError as err:
        return str(err)
    except RuntimeError as err:
        return str(err).splitlines()[0]
    return "non-finite value (node not identified)"


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` against central differences.

    The scalar checked is ``sum(w * fn(*inputs))`` for a fixed random ``w``.
    Per input, the discrepancy is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max-abs values.
    """
    inputs = [x.detach().to(torch.float64) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    try:
        with torch.no_grad():
            probe_out = fn(*inputs)
    except NonFiniteError:
        return GradCheckReport(math.inf, tol=tol, diagnostic=_anomaly_node(fn, inputs))
    w = torch.randn(probe_out.shape, generator=gen, dtype=torch.float64)

    def scalar(*xs: torch.Tensor) -> torch.Tensor:
        return (fn(*xs) * w).sum()

    xs = [x.clone().requires_grad_(True) for x in inputs]
    try:
        value = scalar(*xs)
        analytic = torch.autograd.grad(value, xs, allow_unused=True)
    except NonFiniteError:
        return GradCheckReport(math.inf, tol=tol, diagnostic=_anomaly_node(fn, inputs))
    analytic = [torch.zeros_like(x) if g is None else g for g, x in zip(analytic, xs)]
    if not torch.isfinite(value) or any(not torch.isfinite(g).all() for g in analytic):
        return GradCheckReport(math.inf, tol=tol, diagnostic=_anomaly_node(fn, inputs))

    errors = []
    with torch.no_grad():
        for idx, x in enumerate(inputs):
            numeric = torch.zeros_like(x)
            flat = numeric.view(-1)
            for j in range(x.numel()):
                args = list(inputs)
                plus = x.clone()
                plus.view(-1)[j] += h
                minus = x.clone()
                minus.view(-1)[j] -= h
                args[idx] = plus
                f_plus = scalar(*args)
                args[idx] = minus
                f_minus = scalar(*args)
                flat[j] = (f_plus - f_minus) / (2 * h)
            if not torch.isfinite(numeric).all():
                return GradCheckReport(math.inf, tol=tol, diagnostic=f"finite differences non-finite for input {idx}")
            a = analytic[idx]
            scale = max(a.abs().max().item(), numeric.abs().max().item())
            diff = (a - numeric).abs().max().item()
            errors.append(0.0 if scale == 0.0 else diff / scale)
    return GradCheckReport(max(errors) if errors else 0.0, errors, tol)
