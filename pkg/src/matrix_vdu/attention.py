"""Multi-head self-attention with learned relative-position bias tables.

Four bias variants are supported:

* ``NONE``: plain scaled dot-product attention.
* ``SEPARABLE``: independent lookups on the clipped 1D index delta, the x
  delta and the y delta, summed.
* ``JOINT2D``: one lookup on the (x delta, y delta) pair.
* ``MODALITY_AWARE``: as ``JOINT2D`` but with a separate grid for each
  (query modality, key modality) pair.

Deltas are always ``key - query`` and the bias is added to logits that have
already been divided by ``sqrt(d_k)``.
"""

from __future__ import annotations

import math
from enum import Enum, IntEnum
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from .numerics import softmax_rows


class BiasVariant(str, Enum):
    NONE = "NONE"
    SEPARABLE = "SEPARABLE"
    JOINT2D = "JOINT2D"
    MODALITY_AWARE = "MODALITY_AWARE"


class ModalityPair(IntEnum):
    TEXT_TEXT = 0
    TEXT_VISION = 1
    VISION_TEXT = 2
    VISION_VISION = 3

    @classmethod
    def of(cls, query_modality: int, key_modality: int) -> "ModalityPair":
        return cls(2 * int(query_modality) + int(key_modality))


def bucketize(delta: Union[float, torch.Tensor], buckets: int, scheme: str = "linear"):
    """Quantise a relative coordinate difference in [-1, 1] to ``[0, buckets)``.

    ``linear`` maps ``floor((delta + 1) / 2 * buckets)``; ``log`` first warps
    ``delta`` with ``sign(d) * log1p(32 |d|) / log1p(32)`` so small offsets
    get finer buckets.  Zero always lands on the centre bucket.
    """
    if buckets < 3 or buckets % 2 == 0:
        raise ValueError(f"bucket count must be odd and >= 3, got {buckets}")
    scalar = not isinstance(delta, torch.Tensor)
    d = torch.as_tensor(delta, dtype=torch.float64).clamp(-1.0, 1.0)
    if scheme == "log":
        d = torch.sign(d) * torch.log1p(32.0 * d.abs()) / math.log1p(32.0)
    elif scheme != "linear":
        raise ValueError(f"unknown bucket scheme {scheme!r}")
    idx = torch.floor((d + 1.0) * 0.5 * buckets).long().clamp(0, buckets - 1)
    return int(idx) if scalar else idx


class BiasTable(nn.Module):
    def __init__(
        self,
        variant: BiasVariant,
        heads: int,
        x_buckets: int = 33,
        y_buckets: int = 33,
        max_index_delta: int = 64,
        scheme: str = "linear",
    ):
        super().__init__()
        self.variant = BiasVariant(variant)
        self.heads, self.bx, self.by, self.k1, self.scheme = heads, x_buckets, y_buckets, max_index_delta, scheme
        for b in (x_buckets, y_buckets):
            if b < 3 or b % 2 == 0:
                raise ValueError(f"bucket count must be odd and >= 3, got {b}")
        if self.variant is BiasVariant.SEPARABLE:
            self.t1d = nn.Parameter(torch.zeros(heads, 2 * max_index_delta + 1))
            self.tx = nn.Parameter(torch.zeros(heads, x_buckets))
            self.ty = nn.Parameter(torch.zeros(heads, y_buckets))
        elif self.variant is BiasVariant.JOINT2D:
            self.t2d = nn.Parameter(torch.zeros(heads, x_buckets, y_buckets))
        elif self.variant is BiasVariant.MODALITY_AWARE:
            self.tm = nn.Parameter(torch.zeros(heads, 4, x_buckets, y_buckets))

    def grids(self) -> dict[tuple[int, str], np.ndarray]:
        """``Bx x By`` bias grid per (head, modality pair) for inspection."""
        out = {}
        with torch.no_grad():
            for h in range(self.heads):
                if self.variant is BiasVariant.MODALITY_AWARE:
                    for p in ModalityPair:
                        out[(h, p.name)] = self.tm[h, p].numpy().copy()
                elif self.variant is BiasVariant.JOINT2D:
                    out[(h, "ALL")] = self.t2d[h].numpy().copy()
                elif self.variant is BiasVariant.SEPARABLE:
                    out[(h, "ALL")] = (self.tx[h][:, None] + self.ty[h][None, :]).numpy().copy()
        return out


def bias_matrix(
    positions: torch.Tensor,
    indices: torch.Tensor,
    modalities: torch.Tensor,
    table: BiasTable,
) -> Optional[torch.Tensor]:
    """Per-head additive bias, shape ``(batch, heads, n, n)``.

    ``positions`` is ``(batch, n, 5)`` spatial features (x at 1, y at 2),
    ``indices`` the integer 1D token indices and ``modalities`` the per-token
    modality codes.  Unbatched ``(n, ...)`` inputs return ``(heads, n, n)``.
    Returns ``None`` for the ``NONE`` variant.
    """
    if table.variant is BiasVariant.NONE:
        return None
    unbatched = positions.dim() == 2
    if unbatched:
        positions, indices, modalities = positions[None], indices[None], modalities[None]
    x, y = positions[..., 1], positions[..., 2]
    if table.variant is BiasVariant.SEPARABLE:
        d1 = (indices[:, None, :] - indices[:, :, None]).clamp(-table.k1, table.k1) + table.k1
        bx = bucketize(x[:, None, :] - x[:, :, None], table.bx, table.scheme)
        by = bucketize(y[:, None, :] - y[:, :, None], table.by, table.scheme)
        out = table.t1d[:, d1] + table.tx[:, bx] + table.ty[:, by]
    else:
        bx = bucketize(x[:, None, :] - x[:, :, None], table.bx, table.scheme)
        by = bucketize(y[:, None, :] - y[:, :, None], table.by, table.scheme)
        if table.variant is BiasVariant.JOINT2D:
            out = table.t2d[:, bx, by]
        else:
            pair = 2 * modalities[:, :, None].long() + modalities[:, None, :].long()
            out = table.tm[:, pair, bx, by]
    out = out.permute(1, 0, 2, 3)
    return out[0] if unbatched else out


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads, self.d_k = heads, d_model // heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x, bias=None, valid=None, return_probs: bool = False):
        B, n, d = x.shape
        if valid is None:
            valid = torch.ones(B, n, dtype=torch.bool)

        def split(t):
            return t.view(B, n, self.heads, self.d_k).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_k)
        if bias is not None:
            logits = logits + bias
        probs = softmax_rows(logits, valid[:, None, None, :].expand_as(logits))
        out = (probs @ v).transpose(1, 2).reshape(B, n, d)
        out = self.o(out) * valid[..., None].to(x.dtype)
        return (out, probs) if return_probs else out


def multi_head_attention(x: torch.Tensor, bias, mask, params: MultiHeadAttention) -> torch.Tensor:
    """Unbatched convenience wrapper: ``x`` is ``n x d_model``."""
    b = None if bias is None else bias[None]
    return params(x[None], b, None if mask is None else mask[None])[0]
