"""Desk-scale experiments on synthetic pages.

One pre-training run on a 512-page corpus feeds the modality ladder, the
bias-variant ablation and the resolution sweep; fine-tuning and scoring use a
second corpus drawn with another seed so no evaluation page is ever seen
during pre-training.
"""

from __future__ import annotations

import hashlib
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, dump_config
from .document import Document
from .encoder import LADDER, Ablation
from .pretrain import PretrainHeads, combined_loss, corrupt, pretrain_losses, source_images
from .synth import generate_corpus
from .training import (
    Checkpoint,
    Finetuner,
    Pretrainer,
    build_encoder,
    load_checkpoint,
    load_module,
    prepare_inputs,
    save_checkpoint,
    vocab_for,
)

DESK = RunConfig(
    layers=2, heads=4, d_model=64, max_seq=64, max_image_side=128, vocab_size=512,
    epochs=20, finetune_epochs=10, batch_size=8, warmup_steps=50, learning_rate=1e-3, bias_lr_scale=10.0,
)
SEEDS = (0, 1, 2)
SIDES = (256, 512, 768)
VARIANTS = ("NONE", "JOINT2D", "MODALITY_AWARE")
PRETRAIN_DOCS, PRETRAIN_SEED = 512, 2
ENTITY_DOCS, ENTITY_SEED = 320, 1
COLLAPSE = DESK.replace(epochs=64)
COLLAPSE_DOCS = 128
# bump when a change to the model invalidates cached pre-training runs
CACHE_VERSION = "2"


@dataclass
class EntitySplit:
    train: list[Document]
    held_out: list[Document]


def entity_split(n_docs: int = ENTITY_DOCS, seed: int = ENTITY_SEED) -> EntitySplit:
    """Labelled pages: the train split for fine-tuning, val and test pooled for scoring."""
    docs, splits = generate_corpus(n_docs, seed)
    return EntitySplit([d for d, s in zip(docs, splits) if s == "train"],
                       [d for d, s in zip(docs, splits) if s != "train"])


def pretrain_docs(n_docs: int = PRETRAIN_DOCS, seed: int = PRETRAIN_SEED) -> list[Document]:
    return generate_corpus(n_docs, seed)[0]


def median(xs: Sequence[float]) -> float:
    return float(statistics.median(xs))


# --------------------------------------------------------------------------
# pre-training


@dataclass
class PretrainRun:
    checkpoint: Checkpoint
    rows: list[dict]
    seconds: float
    warmup_checkpoint: Optional[Checkpoint] = None


def read_log(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    cols = lines[0].split("\t")
    return [{c: int(v) if c == "step" else float(v) for c, v in zip(cols, ln.split("\t"))} for ln in lines[1:]]


def run_pretraining(cfg: RunConfig, docs: Sequence[Document], cache_dir=None, tag: str = "",
                    ablation: Ablation = Ablation()) -> PretrainRun:
    """Pre-train from scratch, or reuse a finished run with the same config and corpus from ``cache_dir``.

    The state at the end of warm-up is kept as ``warmup_checkpoint``.  A
    cached run reports the wall time of the run that produced it.
    """
    key = hashlib.sha256((CACHE_VERSION + dump_config(cfg) + repr(ablation) + tag + str(len(docs))).encode()).hexdigest()[:16]
    paths = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        paths = [cache_dir / f"pretrain-{key}{ext}" for ext in (".ckpt", ".tsv", "-warmup.ckpt", ".seconds")]
        if all(p.exists() for p in paths):
            return PretrainRun(load_checkpoint(paths[0]), read_log(paths[1]), float(paths[3].read_text()),
                               load_checkpoint(paths[2]))
    vocab = vocab_for(docs, cfg.vocab_size)
    t0 = time.perf_counter()
    tr = Pretrainer(cfg, vocab, prepare_inputs(docs, vocab, cfg), ablation)
    snap = {}

    def keep_warmup(t, row):
        if row["step"] == cfg.warmup_steps:
            snap["ck"] = t.checkpoint()

    rows = tr.run(paths and paths[1], callback=keep_warmup)
    seconds = time.perf_counter() - t0
    run = PretrainRun(tr.checkpoint(), rows, seconds, snap.get("ck"))
    if paths is not None:
        save_checkpoint(run.checkpoint, paths[0])
        if run.warmup_checkpoint is not None:
            save_checkpoint(run.warmup_checkpoint, paths[2])
        paths[3].write_text(f"{seconds:.3f}\n")
    return run


@dataclass
class Convergence:
    """Held-out task losses at the end of warm-up and after the last step."""

    start: dict[str, float]
    end: dict[str, float]
    ltr_constant: float

    @property
    def ltr_model(self) -> float:
        return self.end["ltr"]

    @property
    def total_drop(self) -> float:
        return 1.0 - self.end["total"] / self.start["total"]

    def decreased(self) -> dict[str, bool]:
        return {k: self.end[k] < self.start[k] for k in self.start}


def convergence(run: PretrainRun, held_out: Sequence[Document], seed: int = 7) -> Convergence:
    """Score the warm-up and final checkpoints on the same corrupted held-out batches.

    Evaluating both on fixed batches removes the batch-to-batch variation of
    the training log, where the share of switched words or mismatched pages
    changes from step to step.
    """
    if run.warmup_checkpoint is None:
        raise ValueError("the run ended before warm-up finished")
    start, _ = held_out_losses(run.warmup_checkpoint, held_out, seed)
    end, const = held_out_losses(run.checkpoint, held_out, seed)
    return Convergence(start, end, const)


@torch.no_grad()
def held_out_losses(ck: Checkpoint, docs: Sequence[Document], seed: int = 7) -> tuple[dict[str, float], float]:
    """Page-weighted task losses in eval mode, plus the loss of the best constant image.

    Pixels and predictions both lie in [0, 1], so the smooth-L1 residual never
    leaves its quadratic branch and the best constant is the mean of the
    per-page mean intensities.
    """
    cfg = ck.config
    model = build_encoder(cfg, ck.vocab)
    heads = PretrainHeads(cfg.d_model)
    load_module("encoder", model, ck.tensors)
    load_module("pretrain", heads, ck.tensors)
    model.eval()
    heads.eval()
    inputs = prepare_inputs(docs, ck.vocab, cfg)
    sums: dict[str, float] = {}
    means, pages = [], []
    for s in range(0, len(inputs), cfg.batch_size):
        clean = inputs[s : s + cfg.batch_size]
        corrupted, plans = corrupt(clean, cfg.rates(), seed + s, len(ck.vocab), ck.vocab.mask_id)
        losses = pretrain_losses(model, heads, clean, corrupted, plans, cfg.tasks)
        losses["total"] = combined_loss(losses)
        for k, v in losses.items():
            sums[k] = sums.get(k, 0.0) + float(v) * len(clean)
        for tgt in source_images(clean, plans):
            px = tgt.pixels[: tgt.content_h, : tgt.content_w]
            pages.append(px)
            means.append(px.mean())
    c = float(np.mean(means))
    const = float(np.mean([np.mean(0.5 * (px - c) ** 2) for px in pages]))
    return {k: v / len(inputs) for k, v in sums.items()}, const


# --------------------------------------------------------------------------
# fine-tuning experiments


def finetune_f1(ck: Checkpoint, split: EntitySplit, ablation: Ablation = Ablation(), seed: int = 0,
                cfg: Optional[RunConfig] = None, fresh_bias: bool = False) -> float:
    cfg = (cfg or ck.config).replace(seed=seed)
    ft = Finetuner(cfg, ck.vocab, "labels", ablation, pretrained=ck, fresh_bias=fresh_bias)
    ft.train(prepare_inputs(split.train, ck.vocab, cfg))
    return ft.evaluate(prepare_inputs(split.held_out, ck.vocab, cfg)).scores.f1


def modality_ladder(ck: Checkpoint, split: EntitySplit, seeds: Sequence[int] = SEEDS) -> dict[str, list[float]]:
    """Entity F1 per seed for each rung, every rung fine-tuned from the same pre-trained encoder."""
    return {name: [finetune_f1(ck, split, ab, s) for s in seeds] for name, ab in LADDER.items()}


def ladder_increments(medians: dict[str, float]) -> list[tuple[str, float]]:
    names = list(LADDER)
    return [(b, medians[b] - medians[a]) for a, b in zip(names, names[1:])]


def variant_ablation(ck: Checkpoint, split: EntitySplit, seeds: Sequence[int] = SEEDS,
                     variants: Sequence[str] = VARIANTS) -> dict[str, list[float]]:
    """Entity F1 per seed for each bias variant.

    All variants share the pre-trained encoder and learn their bias tables
    from zero during fine-tuning, so the table layout is the only difference.
    """
    out = {}
    for v in variants:
        cfg = ck.config.replace(bias_variant=v)
        out[v] = [finetune_f1(ck, split, Ablation(), s, cfg, fresh_bias=True) for s in seeds]
    return out


@dataclass
class SweepPoint:
    side: int
    max_visual_tokens: int
    observed_visual_tokens: int
    f1: float


def resolution_sweep(ck: Checkpoint, split: EntitySplit, sides: Sequence[int] = SIDES,
                     train_sides: Sequence[int] = SIDES, seed: int = 0) -> list[SweepPoint]:
    """Fine-tune once on pages rendered at every ``train_sides`` size, then score at each of ``sides``."""
    cfg = ck.config.replace(seed=seed)
    ft = Finetuner(cfg, ck.vocab, "labels", Ablation(), pretrained=ck)
    views = [prepare_inputs(split.train, ck.vocab, cfg, s) for s in train_sides]
    ft.train(views[0], views=views[1:])
    out = []
    for side in sides:
        inputs = prepare_inputs(split.held_out, ck.vocab, cfg, side)
        observed = max(int(np.prod(di.image.grid)) for di in inputs)
        f1 = ft.evaluate(inputs).scores.f1
        out.append(SweepPoint(side, (side // 32) ** 2, observed, f1))
    return out


# --------------------------------------------------------------------------
# embedding collapse


@dataclass
class CollapseTrace:
    tasks: tuple
    norms: list[float] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.norms[-1] / self.norms[0]


def mean_embedding_norm(table: torch.Tensor, ids: torch.Tensor) -> float:
    return float(table.detach()[ids].norm(dim=1).mean())


def collapse_study(cfg: RunConfig, docs: Sequence[Document],
                   task_sets: Sequence[tuple] = (("mlm",), ("mlm", "ts"))) -> list[CollapseTrace]:
    """Track the mean L2 norm of the used subword embeddings under each task set."""
    vocab = vocab_for(docs, cfg.vocab_size)
    inputs = prepare_inputs(docs, vocab, cfg)
    ids = torch.tensor(sorted({i for di in inputs for p in di.pieces for i in p}))
    traces = []
    for tasks in task_sets:
        tr = Pretrainer(cfg.replace(tasks=tasks), vocab, inputs)
        trace = CollapseTrace(tuple(tasks), [mean_embedding_norm(tr.model.embed.weight, ids)])
        tr.run(callback=lambda t, row: trace.norms.append(mean_embedding_norm(t.model.embed.weight, ids)))
        traces.append(trace)
    return traces

