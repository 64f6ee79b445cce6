from collections import Counter

import numpy as np
import pytest

from matrix_vdu.document import denormalize_box
from matrix_vdu.synth import (
    ENTITY_TYPES,
    TEMPLATES,
    GenerationError,
    generate_corpus,
    generate_synthetic,
)


def test_deterministic():
    a, b = generate_synthetic(7, 3), generate_synthetic(7, 3)
    assert a == b
    assert np.array_equal(a.image.pixels, b.image.pixels)
    assert generate_synthetic(8, 3) != a


def test_unknown_template():
    with pytest.raises(GenerationError):
        generate_synthetic(0, len(TEMPLATES))


def _pixel_rect(box, doc):
    x, y, w, h = (int(round(v)) for v in denormalize_box(box, doc.content_w, doc.content_h))
    return slice(y, y + max(h, 1)), slice(x, x + max(w, 1))


@pytest.mark.parametrize("template", range(len(TEMPLATES)))
def test_rasterization_coverage(template):
    for seed in range(5):
        doc = generate_synthetic(seed, template)
        ink = doc.image.pixels < 0.5
        covered = np.zeros_like(ink)
        for w in doc.words:
            rows, cols = _pixel_rect(w.box, doc)
            assert ink[rows, cols].any(), f"word {w.text!r} rendered no ink"
            covered[rows, cols] = True
        for r in doc.rulings:
            rows, cols = _pixel_rect(r, doc)
            covered[rows, cols] = True
        assert not ink[~covered].any(), "ink outside every word box and ruling"


def test_each_word_box_holds_its_own_ink():
    # dark pixels belonging to a word lie inside its box: boxes of distinct
    # words never overlap, so ink inside a box is that word's ink
    doc = generate_synthetic(11, 0)
    mask = np.zeros(doc.image.pixels.shape, dtype=int)
    for w in doc.words:
        rows, cols = _pixel_rect(w.box, doc)
        mask[rows, cols] += 1
    assert mask.max() == 1


def test_labels_and_classes():
    tags = set()
    for k in range(32):
        doc = generate_synthetic(k, k % 8)
        assert doc.page_class == TEMPLATES[k % 8]
        tags |= set(doc.tags)
        for prev, cur in zip(["O"] + doc.tags, doc.tags):
            if cur.startswith("I-"):
                assert prev[2:] == cur[2:]
    assert tags <= {"O"} | {f"{p}-{e}" for e in ENTITY_TYPES for p in "BI"}
    assert {t[2:] for t in tags if t != "O"} == set(ENTITY_TYPES)


def test_corpus_class_distribution_uniform():
    docs, splits = generate_corpus(512, seed=0)
    counts = Counter(d.page_class for d in docs)
    assert len(counts) == 8
    for c in counts.values():
        assert abs(c - 64) <= 6.4
    split_counts = Counter(splits)
    assert set(split_counts) == {"train", "val", "test"}
    for name in TEMPLATES:
        assert {s for d, s in zip(docs, splits) if d.page_class == name} == {"train", "val", "test"}
