"""Sequence-labelling and page-classification heads plus entity-level F1."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .synth import ENTITY_TYPES, TEMPLATES


@dataclass(frozen=True)
class LabelSet:
    tags: tuple[str, ...]
    classes: tuple[str, ...]

    def __post_init__(self):
        if "O" not in self.tags:
            raise ValueError("tag set must contain O")
        for t in self.tags:
            if t != "O" and (t[:2] not in ("B-", "I-") or ("I-" + t[2:]) not in self.tags or ("B-" + t[2:]) not in self.tags):
                raise ValueError(f"tag {t!r} lacks its B-/I- partner")

    @classmethod
    def default(cls) -> "LabelSet":
        tags = ("O",) + tuple(f"{p}-{e}" for e in ENTITY_TYPES for p in ("B", "I"))
        return cls(tags, TEMPLATES)

    def tag_id(self, tag: Optional[str]) -> int:
        return self.tags.index(tag or "O")

    def class_id(self, name: str) -> int:
        return self.classes.index(name)


class FinetuneHeads(nn.Module):
    def __init__(self, d_model: int, labels: LabelSet, seed: int = 0):
        super().__init__()
        self.tagger = nn.Linear(d_model, len(labels.tags))
        self.classifier = nn.Linear(d_model, len(labels.classes))
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for lin in (self.tagger, self.classifier):
                lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * 0.02)
                lin.bias.zero_()


def sequence_label(outputs: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    """Per-word tag distribution."""
    return torch.softmax(head(outputs), dim=-1)


def classify(cls_output: torch.Tensor, head: nn.Linear) -> torch.Tensor:
    return torch.softmax(head(cls_output), dim=-1)


# --------------------------------------------------------------------------
# metrics


def spans(tags: Sequence[str]) -> set[tuple[int, int, str]]:
    """Maximal ``B-X I-X*`` runs as ``(start, end_exclusive, type)``.

    An ``I-X`` that does not continue a run of type ``X`` opens a new span,
    exactly as if it were ``B-X``.
    """
    out = set()
    start, kind = None, None
    for k, t in enumerate(list(tags) + ["O"]):
        t = t or "O"
        cont = t.startswith("I-") and kind == t[2:]
        if start is not None and not cont:
            out.add((start, k, kind))
            start, kind = None, None
        if t != "O" and not cont:
            start, kind = k, t[2:]
    return out


@dataclass
class EntityScores:
    per_class: dict[str, tuple[float, float, float, int]]
    precision: float
    recall: float
    f1: float

    def to_tsv(self) -> str:
        rows = ["class\tprecision\trecall\tf1\tsupport"]
        for name in sorted(self.per_class):
            p, r, f, s = self.per_class[name]
            rows.append(f"{name}\t{p:.6f}\t{r:.6f}\t{f:.6f}\t{s}")
        rows.append(f"micro\t{self.precision:.6f}\t{self.recall:.6f}\t{self.f1:.6f}\t"
                    f"{sum(v[3] for v in self.per_class.values())}")
        return "\n".join(rows) + "\n"


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    if n_pred == 0 and n_gold == 0:
        p = r = f = 1.0
    return p, r, f


def entity_scores(predicted: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> EntityScores:
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted documents vs {len(gold)} gold")
    tp, npred, ngold = Counter(), Counter(), Counter()
    for p_doc, g_doc in zip(predicted, gold):
        if len(p_doc) != len(g_doc):
            raise ValueError(f"tag sequences differ in length: {len(p_doc)} vs {len(g_doc)}")
        ps, gs = spans(p_doc), spans(g_doc)
        for s in ps:
            npred[s[2]] += 1
        for s in gs:
            ngold[s[2]] += 1
        for s in ps & gs:
            tp[s[2]] += 1
    per_class = {k: (*_prf(tp[k], npred[k], ngold[k]), ngold[k]) for k in set(npred) | set(ngold)}
    p, r, f = _prf(sum(tp.values()), sum(npred.values()), sum(ngold.values()))
    return EntityScores(per_class, p, r, f)


def entity_f1(predicted: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> float:
    """Micro entity-level F1 with exact span and type matching.

    Accepts either one tag sequence per argument or lists of documents.
    """
    if predicted and isinstance(predicted[0], str) or (gold and isinstance(gold[0], str)):
        predicted, gold = [predicted], [gold]
    return entity_scores(predicted, gold).f1
