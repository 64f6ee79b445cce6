"""Self-supervised tasks: corruption plans, task heads and their losses.

Task keys used throughout: ``lreg`` (line regression), ``lred`` (line
redaction), ``mlm`` (multi-modal masked language modelling), ``ts`` (token
switch), ``ltr`` (learn to reconstruct) and ``tdi`` (text describes image).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .encoder import Ablation, Batch, DocInput, LayerNorm2d, MatrixEncoder, PreparedImage, visual_grid
from .numerics import NumericError, cross_entropy, gelu, smooth_l1, upsample2x
from .tokenizer import SPECIALS

TASKS = ("lreg", "lred", "mlm", "ts", "ltr", "tdi")
ALPHA = {"lreg": 6.0, "lred": 0.5, "mlm": 1.0, "ts": 1.0, "ltr": 1.0, "tdi": 1.0}
DECODER_CHANNELS = (128, 64, 32, 16, 1)


@dataclass(frozen=True)
class CorruptionRates:
    mask: float = 0.15
    switch: float = 0.15
    redact: float = 0.15
    mismatch: float = 0.20
    mask_token: float = 0.8
    random_token: float = 0.1

    def __post_init__(self):
        for name in ("mask", "switch", "redact", "mismatch", "mask_token", "random_token"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"rate {name}={v} outside [0, 1]")
        if self.mask_token + self.random_token > 1.0:
            raise ValueError("mask_token + random_token exceeds 1")

    @classmethod
    def zero(cls) -> "CorruptionRates":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass
class CorruptionPlan:
    """Exact record of what was done to one page of a batch.

    ``masked`` holds ``(word, action, replacement_id)`` with action one of
    ``mask``/``random``/``keep``; ``image_source`` is the batch position whose
    image the page was paired with (itself unless ``mismatched``).
    """

    masked: list[tuple[int, str, int]] = field(default_factory=list)
    switched_pairs: list[tuple[int, int]] = field(default_factory=list)
    redacted_lines: list[int] = field(default_factory=list)
    mismatched: bool = False
    image_source: int = -1
    rng_seed: int = 0

    @property
    def masked_words(self) -> set[int]:
        return {w for w, _, _ in self.masked}

    @property
    def switched_words(self) -> set[int]:
        return {w for pair in self.switched_pairs for w in pair}

    def is_empty(self) -> bool:
        return not (self.masked or self.switched_pairs or self.redacted_lines or self.mismatched)


def _plan_one(di: DocInput, b: int, batch: Sequence[DocInput], rates: CorruptionRates, seed: int,
              vocab_size: int) -> CorruptionPlan:
    rng = np.random.default_rng([seed, b])
    plan = CorruptionPlan(rng_seed=seed, image_source=b)
    donors = [k for k, o in enumerate(batch) if k != b and o.image is not None]
    if di.image is not None and donors and rng.random() < rates.mismatch:
        plan.mismatched = True
        plan.image_source = donors[int(rng.integers(len(donors)))]
    n = di.n_words
    taken = np.zeros(n, dtype=bool)
    if batch[plan.image_source].image is not None and n:
        for lid in sorted(set(di.line_ids.tolist())):
            if rng.random() < rates.redact:
                plan.redacted_lines.append(int(lid))
        taken |= np.isin(di.line_ids, plan.redacted_lines)
    free = np.flatnonzero(~taken)
    if len(free):
        p = min(1.0, rates.mask * n / len(free))
        for w in free[rng.random(len(free)) < p].tolist():
            u = rng.random()
            if u < rates.mask_token:
                plan.masked.append((w, "mask", -1))
            elif u < rates.mask_token + rates.random_token:
                plan.masked.append((w, "random", int(rng.integers(len(SPECIALS), vocab_size))))
            else:
                plan.masked.append((w, "keep", -1))
            taken[w] = True
    free = np.flatnonzero(~taken)
    if len(free) >= 2:
        chosen = free[rng.random(len(free)) < rates.switch]
        chosen = chosen[rng.permutation(len(chosen))]
        for i, j in zip(chosen[0::2].tolist(), chosen[1::2].tolist()):
            if di.pieces[i] != di.pieces[j]:
                plan.switched_pairs.append((min(i, j), max(i, j)))
    return plan


def _redact(image: PreparedImage, boxes: np.ndarray) -> PreparedImage:
    px = image.pixels.copy()
    for x, y, w, h in boxes:
        x0, x1 = int(math.floor(x * image.content_w)), int(math.ceil((x + w) * image.content_w))
        y0, y1 = int(math.floor(y * image.content_h)), int(math.ceil((y + h) * image.content_h))
        px[y0:y1, x0:x1] = 0.0
    return PreparedImage(px, image.content_w, image.content_h)


def line_boxes(di: DocInput) -> dict[int, np.ndarray]:
    out = {}
    for lid in sorted(set(di.line_ids.tolist())):
        b = di.boxes[di.line_ids == lid]
        x1, y1 = b[:, 0].min(), b[:, 1].min()
        x2, y2 = (b[:, 0] + b[:, 2]).max(), (b[:, 1] + b[:, 3]).max()
        out[lid] = np.array([x1, y1, x2 - x1, y2 - y1])
    return out


def source_images(batch: Sequence[DocInput], plans: Sequence[CorruptionPlan]) -> list[Optional[PreparedImage]]:
    """Pre-redaction image each page is paired with (the reconstruction target)."""
    return [batch[p.image_source].image if p.image_source >= 0 else di.image for di, p in zip(batch, plans)]


def replay(batch: Sequence[DocInput], plans: Sequence[CorruptionPlan], mask_id: int = 2) -> list[DocInput]:
    """Apply stored plans to a clean batch; a pure function of its inputs."""
    images = source_images(batch, plans)
    out = []
    for di, plan, img in zip(batch, plans, images):
        pieces = [list(p) for p in di.pieces]
        for w, action, rid in plan.masked:
            if action == "mask":
                pieces[w] = [mask_id]
            elif action == "random":
                pieces[w] = [rid]
        for i, j in plan.switched_pairs:
            pieces[i], pieces[j] = pieces[j], pieces[i]
        if img is not None and plan.redacted_lines:
            lb = line_boxes(di)
            img = _redact(img, np.array([lb[l] for l in plan.redacted_lines]))
        out.append(DocInput(pieces, di.boxes, di.line_ids, img, di.doc))
    return out


def corrupt(batch: Sequence[DocInput], rates: CorruptionRates, seed: int, vocab_size: int,
            mask_id: int = 2) -> tuple[list[DocInput], list[CorruptionPlan]]:
    """Sample a plan for every page, then replay it."""
    plans = [_plan_one(di, b, batch, rates, seed, vocab_size) for b, di in enumerate(batch)]
    return replay(batch, plans, mask_id), plans


# --------------------------------------------------------------------------
# heads


class ReconstructionDecoder(nn.Module):
    """Five ``upsample -> 3x3 conv`` blocks.

    Hidden blocks apply a channel layer norm before the GELU; without it the
    unnormalised stack grows until the final sigmoid saturates on the mostly
    white pages.  The last block ends in a sigmoid.
    """

    def __init__(self, d_model: int):
        super().__init__()
        chans = (d_model,) + DECODER_CHANNELS
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans, chans[1:]))
        self.norms = nn.ModuleList(LayerNorm2d(b) for b in DECODER_CHANNELS[:-1])

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        x = grid
        for k, conv in enumerate(self.convs):
            x = conv(upsample2x(x))
            x = torch.sigmoid(x) if k == len(self.convs) - 1 else gelu(self.norms[k](x))
        return x


class PretrainHeads(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.lreg = nn.Linear(d_model, 4)
        self.ts = nn.Linear(d_model, 2)
        self.mlm = nn.Linear(d_model, d_model)
        self.tdi = nn.Linear(d_model, 2)
        self.lred = nn.Linear(d_model, 2)
        self.decoder = ReconstructionDecoder(d_model)


# --------------------------------------------------------------------------
# losses


def _masked_ce(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        return logits.sum() * 0.0
    return cross_entropy(logits[mask], labels[mask])


def line_targets(di: DocInput) -> np.ndarray:
    """Corner form ``(x1, y1, x2, y2)`` of each word's owning line."""
    if di.doc is not None:
        return np.array([di.doc.line_of(k).box.corners for k in range(di.n_words)]).reshape(-1, 4)
    lb = line_boxes(di)
    return np.array([[b[0], b[1], b[0] + b[2], b[1] + b[3]] for b in (lb[l] for l in di.line_ids)]).reshape(-1, 4)


def loss_line_regression(pred: torch.Tensor, targets: torch.Tensor, word_mask: torch.Tensor) -> torch.Tensor:
    """Mean over real words of the summed squared corner error."""
    if not bool(word_mask.any()):
        return pred.sum() * 0.0
    err = ((pred - targets) ** 2).sum(-1)
    return err[word_mask].mean()


def loss_token_switch(logits: torch.Tensor, switched: torch.Tensor, word_mask: torch.Tensor) -> torch.Tensor:
    return _masked_ce(logits, switched, word_mask)


def loss_line_redaction(logits: torch.Tensor, redacted: torch.Tensor, word_mask: torch.Tensor) -> torch.Tensor:
    return _masked_ce(logits, redacted, word_mask)


def loss_tdi(cls_logits: torch.Tensor, mismatched: torch.Tensor) -> torch.Tensor:
    return cross_entropy(cls_logits, mismatched)


def loss_mm_mlm(pred: torch.Tensor, clean: torch.Tensor, masked: torch.Tensor, stop_target: bool = False) -> torch.Tensor:
    """Mean elementwise L1 at masked positions; zero when nothing is masked."""
    if not bool(masked.any()):
        return pred.sum() * 0.0
    target = clean.detach() if stop_target else clean
    return (pred[masked] - target[masked]).abs().mean()


def loss_ltr(pred: torch.Tensor, original: torch.Tensor, content_mask: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over content pixels only."""
    return smooth_l1(pred[content_mask], original[content_mask])


def combined_loss(losses: Mapping[str, torch.Tensor], weights: Mapping[str, float] = ALPHA):
    total = 0.0
    for task, value in losses.items():
        v = value if isinstance(value, torch.Tensor) else torch.tensor(float(value))
        if not bool(torch.isfinite(v).all()):
            raise NumericError(f"non-finite {task} loss")
        total = total + weights[task] * v
    return total


# --------------------------------------------------------------------------
# labels and the full forward


def word_labels(batch: Batch, inputs: Sequence[DocInput], plans: Sequence[CorruptionPlan]) -> dict[str, torch.Tensor]:
    B, T = len(inputs), batch.t_max
    sw = torch.zeros(B, T, dtype=torch.long)
    rd = torch.zeros(B, T, dtype=torch.long)
    mk = torch.zeros(B, T, dtype=torch.bool)
    tgt = torch.zeros(B, T, 4)
    for b, (di, plan) in enumerate(zip(inputs, plans)):
        n = di.n_words
        for w in plan.switched_words:
            sw[b, w] = 1
        for w in plan.masked_words:
            mk[b, w] = True
        if plan.redacted_lines and n:
            rd[b, :n] = torch.as_tensor(np.isin(di.line_ids, plan.redacted_lines).astype(np.int64))
        if n:
            tgt[b, :n] = torch.as_tensor(line_targets(di))
    return {"switched": sw, "redacted": rd, "masked": mk, "line_targets": tgt,
            "mismatched": torch.tensor([int(p.mismatched) for p in plans], dtype=torch.long)}


def _pad_rows(rows: Sequence[torch.Tensor], t_max: int, d: int) -> torch.Tensor:
    out = []
    for r in rows:
        pad = t_max - r.shape[0]
        out.append(torch.cat([r, r.new_zeros(pad, d)], 0) if pad else r)
    return torch.stack(out)


def pretrain_losses(
    model: MatrixEncoder,
    heads: PretrainHeads,
    clean: Sequence[DocInput],
    corrupted: Sequence[DocInput],
    plans: Sequence[CorruptionPlan],
    tasks: Sequence[str] = TASKS,
    ablation: Ablation = Ablation(),
    stop_target: bool = False,
) -> dict[str, torch.Tensor]:
    """Every enabled task loss for one corrupted batch."""
    d = model.config.d_model
    clean_emb = [model.embed.pooled(di.pieces) for di in clean]
    batch, hidden = model(corrupted, ablation)
    labels = word_labels(batch, clean, plans)
    text = hidden[:, batch.text_slice]
    wm = batch.word_mask
    out: dict[str, torch.Tensor] = {}
    if "lreg" in tasks:
        out["lreg"] = loss_line_regression(heads.lreg(text), labels["line_targets"], wm)
    if "lred" in tasks:
        out["lred"] = loss_line_redaction(heads.lred(text), labels["redacted"], wm)
    if "mlm" in tasks:
        out["mlm"] = loss_mm_mlm(heads.mlm(text), _pad_rows(clean_emb, batch.t_max, d), labels["masked"], stop_target)
    if "ts" in tasks:
        out["ts"] = loss_token_switch(heads.ts(text), labels["switched"], wm)
    if "tdi" in tasks:
        out["tdi"] = loss_tdi(heads.tdi(hidden[:, 0]), labels["mismatched"])
    if "ltr" in tasks:
        per_doc = []
        targets = source_images(clean, plans)
        groups: dict[tuple, list[int]] = {}
        for b, tgt in enumerate(targets):
            if tgt is not None and batch.grids[b] is not None:
                groups.setdefault(batch.grids[b], []).append(b)
        for g in sorted(groups):
            bs = groups[g]
            preds = heads.decoder(torch.stack([visual_grid(batch, hidden, b) for b in bs]))[:, 0]
            for pred, b in zip(preds, bs):
                tgt = targets[b]
                mask = torch.zeros(pred.shape, dtype=torch.bool)
                mask[: tgt.content_h, : tgt.content_w] = True
                per_doc.append(loss_ltr(pred, torch.as_tensor(tgt.pixels), mask))
        out["ltr"] = torch.stack(per_doc).mean() if per_doc else hidden.sum() * 0.0
    return out


def plan_copy(plans: Sequence[CorruptionPlan]) -> list[CorruptionPlan]:
    return copy.deepcopy(list(plans))
