import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from matrix_vdu.encoder import EncoderConfig, MatrixEncoder, doc_input
from matrix_vdu.numerics import NumericError
from matrix_vdu.pretrain import (
    ALPHA,
    TASKS,
    CorruptionRates,
    PretrainHeads,
    ReconstructionDecoder,
    combined_loss,
    corrupt,
    loss_line_regression,
    loss_ltr,
    loss_mm_mlm,
    loss_tdi,
    loss_token_switch,
    pretrain_losses,
    replay,
)
from matrix_vdu.synth import generate_synthetic
from matrix_vdu.tokenizer import build_vocab


@pytest.fixture(scope="module")
def batch():
    docs = [generate_synthetic(k, k % 8) for k in range(8)]
    vocab = build_vocab([w.text for d in docs for w in d.words], 128)
    return [doc_input(d, vocab, 64) for d in docs], vocab


def test_zero_rates_leave_batch_clean(batch):
    inputs, vocab = batch
    out, plans = corrupt(inputs, CorruptionRates.zero(), 5, len(vocab))
    assert all(p.is_empty() for p in plans)
    for a, b in zip(inputs, out):
        assert a.pieces == b.pieces and np.array_equal(a.image.pixels, b.image.pixels)


def test_replay_reproduces_corruption(batch):
    inputs, vocab = batch
    out, plans = corrupt(inputs, CorruptionRates(), 11, len(vocab))
    again = replay(inputs, plans)
    for a, b in zip(out, again):
        assert a.pieces == b.pieces and np.array_equal(a.image.pixels, b.image.pixels)


rate = st.floats(0.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), mask=rate, switch=rate, redact=rate, mismatch=rate)
def test_plans_keep_word_sets_disjoint_and_replay(batch, seed, mask, switch, redact, mismatch):
    inputs, vocab = batch
    out, plans = corrupt(inputs, CorruptionRates(mask, switch, redact, mismatch), seed, len(vocab))
    for di, plan in zip(inputs, plans):
        redacted = set(np.flatnonzero(np.isin(di.line_ids, plan.redacted_lines)).tolist())
        masked, switched = plan.masked_words, plan.switched_words
        assert not (masked & switched or masked & redacted or switched & redacted)
        assert all(0 <= w < di.n_words for w in masked | switched)
    for a, b in zip(out, replay(inputs, plans)):
        assert a.pieces == b.pieces and np.array_equal(a.image.pixels, b.image.pixels)


def test_corruption_is_seeded(batch):
    inputs, vocab = batch
    _, p1 = corrupt(inputs, CorruptionRates(), 3, len(vocab))
    _, p2 = corrupt(inputs, CorruptionRates(), 3, len(vocab))
    assert p1 == p2


def test_mask_and_mismatch_rates_over_ten_thousand_documents(batch):
    inputs, vocab = batch
    n_docs = masked = words = mismatched = 0
    seed = 0
    while n_docs < 10_000:
        _, plans = corrupt(inputs, CorruptionRates(), seed, len(vocab))
        for di, p in zip(inputs, plans):
            masked += len(p.masked)
            words += di.n_words
            mismatched += p.mismatched
        n_docs += len(inputs)
        seed += 1
    assert abs(masked / words - 0.15) < 0.01
    assert abs(mismatched / n_docs - 0.20) < 0.01


def test_switched_pairs_swap_text_not_boxes(batch):
    inputs, vocab = batch
    out, plans = corrupt(inputs, CorruptionRates(mask=0, redact=0, mismatch=0, switch=0.5), 1, len(vocab))
    seen = 0
    for di, co, p in zip(inputs, out, plans):
        for i, j in p.switched_pairs:
            assert co.pieces[i] == di.pieces[j] and co.pieces[j] == di.pieces[i]
            seen += 1
        assert np.array_equal(co.boxes, di.boxes)
    assert seen > 0


def test_redaction_zeroes_line_pixels_only(batch):
    inputs, vocab = batch
    out, plans = corrupt(inputs, CorruptionRates(mask=0, switch=0, mismatch=0, redact=1.0), 2, len(vocab))
    for di, co in zip(inputs, out):
        diff = co.image.pixels != di.image.pixels
        assert diff.any()
        assert np.all(co.image.pixels[diff] == 0.0)


def test_line_regression_examples():
    tgt = torch.tensor([[[0.1, 0.2, 0.3, 0.4]]])
    mask = torch.ones(1, 1, dtype=torch.bool)
    assert loss_line_regression(tgt.clone(), tgt, mask).item() == 0.0
    assert loss_line_regression(tgt + 0.1, tgt, mask).item() == pytest.approx(0.04, abs=1e-15)


def test_token_switch_examples():
    labels = torch.tensor([[0, 1, 1, 0, 0]])
    mask = torch.ones(1, 5, dtype=torch.bool)
    forced = torch.stack([torch.where(labels == 0, 10.0, -10.0), torch.where(labels == 1, 10.0, -10.0)], -1)
    assert loss_token_switch(forced.double(), labels, mask).item() < 1e-4
    assert loss_token_switch(torch.zeros(1, 5, 2), labels, mask).item() == pytest.approx(math.log(2), abs=1e-15)
    logits = torch.randn(1, 5, 2, generator=torch.Generator().manual_seed(0))
    brute = 0.0
    for k in range(5):
        a, b = logits[0, k].tolist()
        z = math.log(math.exp(a) + math.exp(b))
        brute += z - (a, b)[int(labels[0, k])]
    assert loss_token_switch(logits, labels, mask).item() == pytest.approx(brute / 5, abs=1e-14)


def test_mm_mlm_examples():
    clean = torch.randn(1, 4, 3, generator=torch.Generator().manual_seed(1))
    masked = torch.tensor([[True, False, True, True]])
    assert loss_mm_mlm(clean.clone(), clean, masked).item() == 0.0
    pred = torch.randn(1, 4, 3, generator=torch.Generator().manual_seed(2))
    brute = sum(abs(pred[0, w, c] - clean[0, w, c]).item() for w in (0, 2, 3) for c in range(3)) / 9
    assert loss_mm_mlm(pred, clean, masked).item() == pytest.approx(brute, abs=1e-14)


def test_mm_mlm_zero_table_gives_zero_loss(batch):
    inputs, vocab = batch
    torch.manual_seed(0)
    model = MatrixEncoder(EncoderConfig(layers=1, heads=2, d_model=8, max_seq=64, max_image_side=64,
                                        vocab_size=len(vocab), dropout=0.0))
    heads = PretrainHeads(8)
    with torch.no_grad():
        model.embed.weight.zero_()
        heads.mlm.weight.zero_()
        heads.mlm.bias.zero_()
    out, plans = corrupt(inputs, CorruptionRates(), 0, len(vocab))
    losses = pretrain_losses(model, heads, inputs, out, plans, ("mlm",))
    assert losses["mlm"].item() == 0.0


def test_mm_mlm_target_path_gradient(batch):
    inputs, vocab = batch
    torch.manual_seed(0)
    model = MatrixEncoder(EncoderConfig(layers=1, heads=2, d_model=8, max_seq=64, max_image_side=64,
                                        vocab_size=len(vocab), dropout=0.0))
    heads = PretrainHeads(8)
    out, plans = corrupt(inputs, CorruptionRates(mask=0.5), 0, len(vocab))
    masked_ids = {i for di, p in zip(inputs, plans) for w in p.masked_words for i in di.pieces[w]}
    for stop, expect in ((False, True), (True, False)):
        model.zero_grad()
        pretrain_losses(model, heads, inputs, out, plans, ("mlm",), stop_target=stop)["mlm"].backward()
        g = model.embed.weight.grad
        # a piece that only appears as a clean target receives gradient solely through the target path
        input_ids = {i for di in out for p in di.pieces for i in p}
        target_only = sorted(masked_ids - input_ids)
        assert target_only
        assert bool((g[target_only].abs().sum(1) > 0).all()) == expect


def test_decoder_shape_and_range():
    torch.manual_seed(0)
    dec = ReconstructionDecoder(8)
    out = dec(torch.randn(2, 8, 3, 4))
    assert out.shape == (2, 1, 96, 128)
    assert float(out.detach().min()) >= 0 and float(out.detach().max()) <= 1


def test_ltr_loss_ignores_padding():
    orig = torch.rand(4, 4)
    pred = orig.clone()
    pred[:, 3] = 5.0
    mask = torch.ones(4, 4, dtype=torch.bool)
    mask[:, 3] = False
    assert loss_ltr(pred, orig, mask).item() == 0.0


def test_tdi_uniform_logits():
    assert loss_tdi(torch.zeros(4, 2), torch.tensor([0, 1, 1, 0])).item() == pytest.approx(math.log(2))


def test_combined_loss_weights():
    ones = {t: torch.tensor(1.0) for t in TASKS}
    assert combined_loss(ones).item() == 10.5
    assert sum(ALPHA.values()) == 10.5
    with pytest.raises(NumericError, match="ltr"):
        combined_loss({**ones, "ltr": torch.tensor(float("nan"))})


def test_all_tasks_produce_finite_losses(batch):
    inputs, vocab = batch
    torch.manual_seed(0)
    model = MatrixEncoder(EncoderConfig(layers=1, heads=2, d_model=8, max_seq=64, max_image_side=64,
                                        vocab_size=len(vocab), dropout=0.0))
    heads = PretrainHeads(8)
    out, plans = corrupt(inputs, CorruptionRates(), 4, len(vocab))
    losses = pretrain_losses(model, heads, inputs, out, plans)
    assert set(losses) == set(TASKS)
    assert all(math.isfinite(v.item()) for v in losses.values())
