import pytest
import torch
from hypothesis import given, strategies as st

from matrix_vdu.finetune import FinetuneHeads, LabelSet, classify, entity_f1, entity_scores, sequence_label, spans

LABELS = LabelSet.default()
tag = st.sampled_from(LABELS.tags)


def test_default_label_set():
    assert len(LABELS.tags) == 9 and LABELS.tags[0] == "O"
    assert len(LABELS.classes) == 8
    with pytest.raises(ValueError):
        LabelSet(("B-KEY",), ("a",))
    with pytest.raises(ValueError):
        LabelSet(("O", "B-KEY"), ("a",))


def test_forced_head_outputs():
    heads = FinetuneHeads(4, LABELS)
    with torch.no_grad():
        heads.tagger.weight.zero_()
        heads.tagger.bias.fill_(-50.0)
        heads.tagger.bias[0] = 50.0
    probs = sequence_label(torch.randn(6, 4), heads.tagger)
    assert probs.argmax(-1).tolist() == [0] * 6
    assert torch.allclose(probs.sum(-1), torch.ones(6))
    with torch.no_grad():
        heads.classifier.weight.zero_()
        heads.classifier.bias.zero_()
    assert torch.allclose(classify(torch.randn(4), heads.classifier), torch.full((8,), 1 / 8))
    with torch.no_grad():
        heads.classifier.bias[5] = 30.0
    assert int(classify(torch.randn(4), heads.classifier).argmax()) == 5


def test_head_init_is_seeded():
    a, b = FinetuneHeads(8, LABELS, seed=3), FinetuneHeads(8, LABELS, seed=3)
    assert torch.equal(a.tagger.weight, b.tagger.weight)
    assert torch.all(a.tagger.bias == 0)
    assert abs(a.tagger.weight.std().item() - 0.02) < 0.01


def test_spans_repair_orphan_inside():
    assert spans(["I-KEY", "I-KEY", "O", "B-VALUE", "I-KEY"]) == {(0, 2, "KEY"), (3, 4, "VALUE"), (4, 5, "KEY")}


def test_identical_and_empty_predictions():
    gold = ["B-KEY", "I-KEY", "O", "B-VALUE"]
    assert entity_f1(gold, gold) == 1.0
    assert entity_f1(["O"] * 4, ["O", "B-KEY", "O", "O"]) == 0.0


def test_hand_worked_boundary_error():
    # gold KEY[0,2) VALUE[3,5); predicted KEY[0,2) VALUE[3,6): one of two spans matches
    gold = ["B-KEY", "I-KEY", "O", "B-VALUE", "I-VALUE", "O"]
    pred = ["B-KEY", "I-KEY", "O", "B-VALUE", "I-VALUE", "I-VALUE"]
    sc = entity_scores([pred], [gold])
    assert (sc.precision, sc.recall, sc.f1) == (0.5, 0.5, 0.5)
    assert entity_f1(pred, gold) == 0.5


def test_length_mismatch():
    with pytest.raises(ValueError):
        entity_f1(["O"], ["O", "O"])


def test_report_format():
    rep = entity_scores([["B-KEY", "O"]], [["B-KEY", "B-VALUE"]]).to_tsv().splitlines()
    assert rep[0] == "class\tprecision\trecall\tf1\tsupport"
    assert rep[-1].startswith("micro\t")
    assert len(rep) == 4


@given(st.lists(st.lists(tag, min_size=1, max_size=8).flatmap(
    lambda g: st.tuples(st.just(g), st.lists(tag, min_size=len(g), max_size=len(g)))), min_size=1, max_size=5),
    st.randoms())
def test_f1_symmetric_under_document_order(docs, rnd):
    pred, gold = [p for _, p in docs], [g for g, _ in docs]
    f = entity_f1(pred, gold)
    order = list(range(len(docs)))
    rnd.shuffle(order)
    assert entity_f1([pred[i] for i in order], [gold[i] for i in order]) == f
    padded = entity_f1([p + ["O", "O"] for p in pred], [g + ["O", "O"] for g in gold])
    assert padded == f
    assert 0.0 <= f <= 1.0
