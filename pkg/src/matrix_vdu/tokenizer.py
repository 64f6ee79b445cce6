"""WordPiece-style vocabulary, greedy segmentation and word-level pooling.

Single characters are stored bare and serve both word-initial and
continuation positions.  Longer pieces are either word-initial (``tot``) or
continuation pieces carrying the ``##`` marker (``##als``).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch

PAD, UNK, MASK, CLS = "[PAD]", "[UNK]", "[MASK]", "[CLS]"
SPECIALS = (PAD, UNK, MASK, CLS)
CONT = "##"
MAX_NGRAM = 6


@dataclass
class Vocab:
    pieces: list[str]
    piece_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.pieces[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(self.pieces)) != len(self.pieces):
            raise ValueError("duplicate pieces in vocabulary")
        self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}

    def __len__(self) -> int:
        return len(self.pieces)

    pad_id = property(lambda self: 0)
    unk_id = property(lambda self: 1)
    mask_id = property(lambda self: 2)
    cls_id = property(lambda self: 3)

    @property
    def max_len(self) -> int:
        return max(len(p.removeprefix(CONT)) for p in self.pieces[len(SPECIALS):]) if len(self) > len(SPECIALS) else 1

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.pieces) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def _ngrams(word: str) -> Iterable[str]:
    for n in range(2, MAX_NGRAM + 1):
        for start in range(len(word) - n + 1):
            g = word[start : start + n]
            yield g if start == 0 else CONT + g


def build_vocab(corpus: Iterable[str], target_size: int = 2048) -> Vocab:
    """Frequency-ranked vocabulary over a word multiset.

    Every character seen gets a piece.  Remaining slots go to character
    n-grams (2..6) by descending count, then descending length, then
    lexicographic order, which makes the result deterministic.
    """
    counts = Counter(w.lower() for w in corpus)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    alphabet = sorted({c for w in counts for c in w})
    floor = len(alphabet) + len(SPECIALS)
    if target_size < floor:
        raise ValueError(f"target_size {target_size} below alphabet+specials ({floor})")
    grams: Counter = Counter()
    for w, c in counts.items():
        for g in _ngrams(w):
            grams[g] += c
    ranked = sorted(grams.items(), key=lambda kv: (-kv[1], -len(kv[0].removeprefix(CONT)), kv[0]))
    extra = [g for g, _ in ranked[: target_size - floor]]
    return Vocab(list(SPECIALS) + alphabet + extra)


def tokenize(word: str, vocab: Vocab) -> list[int]:
    """Greedy longest-match-first segmentation of one lower-cased word."""
    word = word.lower()
    ids: list[int] = []
    pos = 0
    longest = vocab.max_len
    p2i = vocab.piece_to_id
    while pos < len(word):
        match = None
        for end in range(min(len(word), pos + longest), pos, -1):
            sub = word[pos:end]
            if end - pos == 1:
                key = CONT + sub if pos > 0 and CONT + sub in p2i else sub
            else:
                key = sub if pos == 0 else CONT + sub
            if key in p2i:
                match = (p2i[key], end)
                break
        if match is None:
            ids.append(vocab.unk_id)
            pos += 1
        else:
            ids.append(match[0])
            pos = match[1]
    return ids


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return "".join(vocab.pieces[i].removeprefix(CONT) for i in ids)


class EmbeddingTable(torch.nn.Module):
    """``vocab_size x d_model`` lookup table (the subword embedding)."""

    def __init__(self, vocab_size: int, d_model: int, std: float = 0.02):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.randn(vocab_size, d_model) * std)

    def pooled(self, pieces: Sequence[Sequence[int]]) -> torch.Tensor:
        """Mean subword embedding per word; returns ``len(pieces) x d_model``."""
        if not pieces:
            return self.weight.new_zeros(0, self.weight.shape[1])
        flat = torch.tensor([i for p in pieces for i in p], dtype=torch.long)
        owner = torch.tensor([k for k, p in enumerate(pieces) for _ in p], dtype=torch.long)
        counts = torch.tensor([len(p) for p in pieces], dtype=self.weight.dtype)
        if bool((counts == 0).any()):
            raise ValueError("every word needs at least one piece")
        sums = self.weight.new_zeros(len(pieces), self.weight.shape[1]).index_add(0, owner, self.weight[flat])
        return sums / counts.unsqueeze(1)


def word_embedding(word: str, vocab: Vocab, table: EmbeddingTable) -> torch.Tensor:
    return table.pooled([tokenize(word, vocab)])[0]
