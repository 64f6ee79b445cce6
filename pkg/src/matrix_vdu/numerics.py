"""Differentiable primitives and a finite-difference gradient checker.

Reverse-mode differentiation is delegated to torch; every tensor the package
creates is float64 unless :func:`set_precision` is asked for 32 bits.  The
checker in :func:`grad_check` never touches autograd for its numerical side,
so it stays an independent oracle for whatever autograd computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5
LEAKY_SLOPE = 0.01


class NumericError(RuntimeError):
    """Raised when a computation produces or receives non-finite values."""


def set_precision(bits: int) -> torch.dtype:
    global DTYPE
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    DTYPE = torch.float64 if bits == 64 else torch.float32
    torch.set_default_dtype(DTYPE)
    return DTYPE


def as_tensor(values, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(values), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def softmax_rows(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``.

    Masked entries come out as exact zeros.  A row without a single valid
    entry is a caller bug and raises instead of producing NaN.
    """
    if logits.shape != mask.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} differ")
    mask = mask.to(torch.bool)
    if not bool(mask.any(dim=-1).all()):
        bad = (~mask.any(dim=-1)).nonzero()[0].tolist()
        raise ValueError(f"softmax row {bad} has no valid entries")
    z = logits.masked_fill(~mask, float("-inf"))
    z = z - z.amax(dim=-1, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean piecewise loss: quadratic below a unit residual, linear above."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    r = (pred - target).abs()
    return torch.where(r < 1.0, 0.5 * r * r, r - 0.5).mean()


def leaky_relu(x: torch.Tensor, slope: float = LEAKY_SLOPE) -> torch.Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    return torch.where(x >= 0, x, slope * x)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` rows."""
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1).mean()


def dropout(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = (torch.rand(x.shape, dtype=x.dtype) >= p).to(x.dtype)
    return x * keep / (1.0 - p)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbour doubling of the two trailing axes."""
    return x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def check_finite(t: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")
    return t


# --------------------------------------------------------------------------
# gradient checking

ParamSpec = Union[Sequence[torch.Tensor], Mapping[str, torch.Tensor], Iterable[tuple]]


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    worst: dict[str, tuple] = field(default_factory=dict)

    @property
    def overall(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def failures(self, tol: float) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if v >= tol}


def _named(params: ParamSpec) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    out = []
    for k, p in enumerate(params):
        if isinstance(p, tuple):
            out.append((str(p[0]), p[1]))
        else:
            out.append((f"param{k}", p))
    return out


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamSpec,
    eps: float = 1e-6,
    max_coords: int = 64,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd against central differences on sampled coordinates.

    ``loss_fn`` must be deterministic and close over ``params``.  Relative
    error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps coordinates
    whose gradient is essentially zero from reporting round-off as error.
    """
    named = _named(params)
    tensors = [p for _, p in named]
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NumericError("loss is non-finite at the unperturbed point")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for (name, p), g in zip(named, grads):
        analytic = (torch.zeros_like(p) if g is None else g.detach()).reshape(-1)
        n = p.numel()
        idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
        flat = p.data.view(-1)
        worst, worst_at = 0.0, None
        for i in idx.tolist():
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[i].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if rel > worst or worst_at is None:
                worst, worst_at = max(rel, worst), (i, a, numeric)
        report.max_rel_error[name] = worst
        report.checked[name] = len(idx)
        report.worst[name] = worst_at
    return report
