"""Shared spatial embedding over ``(index, x, y, w, h)`` for every token."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .document import RelBox
from .numerics import leaky_relu

TOL = 1e-9


@dataclass(frozen=True)
class SpatialFeature:
    index_frac: float
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name, v in zip("ixywh", self.as_tuple()):
            if not -TOL <= v <= 1 + TOL:
                raise ValueError(f"spatial component {name}={v} outside [0, 1]")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.index_frac, self.x, self.y, self.w, self.h)

    @classmethod
    def of(cls, index: int, index_norm: int, box: RelBox) -> "SpatialFeature":
        return cls(min(index / index_norm, 1.0), box.x, box.y, box.w, box.h)


class SpatialEmbedder(nn.Module):
    """Three affine layers, leaky ReLU after the first two."""

    def __init__(self, d_model: int):
        super().__init__()
        self.l1 = nn.Linear(5, d_model)
        self.l2 = nn.Linear(d_model, d_model)
        self.l3 = nn.Linear(d_model, d_model)

    def forward(self, pos: torch.Tensor) -> torch.Tensor:
        return self.l3(leaky_relu(self.l2(leaky_relu(self.l1(pos)))))

    @torch.no_grad()
    def lipschitz_bound(self) -> float:
        return float(
            torch.linalg.matrix_norm(self.l1.weight, ord=2)
            * torch.linalg.matrix_norm(self.l2.weight, ord=2)
            * torch.linalg.matrix_norm(self.l3.weight, ord=2)
        )


def embed_spatial(pos, embedder: SpatialEmbedder) -> torch.Tensor:
    """Embed one feature or an ``(..., 5)`` tensor of features."""
    if isinstance(pos, SpatialFeature):
        pos = torch.tensor(pos.as_tuple(), dtype=embedder.l1.weight.dtype)
    if pos.shape[-1] != 5:
        raise ValueError(f"spatial features have 5 components, got {pos.shape[-1]}")
    if pos.numel() and (float(pos.min()) < -TOL or float(pos.max()) > 1 + TOL):
        raise ValueError("spatial feature component outside [0, 1]")
    return embedder(pos)


def visual_positions(
    grid_h: int,
    grid_w: int,
    content_frac_w: float,
    content_frac_h: float,
    text_token_count: int,
    max_seq: int,
) -> tuple[list[SpatialFeature], list[bool]]:
    """Content-relative features of each backbone cell, row-major.

    Returns the features and a validity flag per cell; cells that lie wholly
    in padding are invalid and carry a placeholder full-page box.
    ``max_seq`` normalises the token index, which continues after the CLS
    token and the ``text_token_count`` words.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dimensions must be positive")
    if not (0 < content_frac_w <= 1 and 0 < content_frac_h <= 1):
        raise ValueError("content fractions must lie in (0, 1]")
    cw = (1.0 / grid_w) / content_frac_w
    ch = (1.0 / grid_h) / content_frac_h
    feats, valid = [], []
    k = 1 + text_token_count
    for r in range(grid_h):
        for c in range(grid_w):
            x, y = c * cw, r * ch
            idx = min(k / max_seq, 1.0)
            k += 1
            if x >= 1.0 - TOL or y >= 1.0 - TOL:
                feats.append(SpatialFeature(idx, 0.0, 0.0, 1.0, 1.0))
                valid.append(False)
                continue
            feats.append(SpatialFeature(idx, x, y, min(cw, 1.0 - x), min(ch, 1.0 - y)))
            valid.append(True)
    return feats, valid
