import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from matrix_vdu.attention import (
    BiasTable,
    BiasVariant,
    ModalityPair,
    MultiHeadAttention,
    bias_matrix,
    bucketize,
    multi_head_attention,
)

VARIANTS = [BiasVariant.SEPARABLE, BiasVariant.JOINT2D, BiasVariant.MODALITY_AWARE]


def _table(variant, heads=2, seed=0, **kw):
    tab = BiasTable(variant, heads, **kw)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in tab.parameters():
            p.copy_(torch.randn(p.shape, generator=g))
    return tab


def _positions(n, seed=0, grid=256):
    rng = np.random.default_rng(seed)
    pos = np.zeros((n, 5))
    pos[:, 1:3] = rng.integers(0, grid // 2, size=(n, 2)) / grid
    pos[:, 3:] = 0.05
    return torch.tensor(pos)


def test_bucketize_examples():
    assert bucketize(0.0, 33) == 16
    assert bucketize(-1.0, 33) == 0
    assert bucketize(1.0, 33) == 32
    assert bucketize(0.0, 33, "log") == 16
    with pytest.raises(ValueError):
        bucketize(0.0, 32)


@pytest.mark.parametrize("scheme", ["linear", "log"])
def test_bucketize_monotone_sweep(scheme):
    deltas = torch.linspace(-1, 1, 10_001, dtype=torch.float64)
    idx = bucketize(deltas, 33, scheme).numpy()
    order = np.argsort(deltas.numpy(), kind="stable")
    assert np.array_equal(idx[order], np.sort(idx))
    assert idx.min() == 0 and idx.max() == 32


def test_same_position_hits_center_bucket():
    tab = _table(BiasVariant.JOINT2D)
    pos = torch.tensor([[0.0, 0.3, 0.4, 0.1, 0.1]] * 4)
    b = bias_matrix(pos, torch.arange(4), torch.zeros(4, dtype=torch.long), tab)
    for h in range(2):
        assert torch.all(b[h] == tab.t2d[h, 16, 16])


@pytest.mark.parametrize("variant", VARIANTS)
def test_translation_by_a_tenth(variant):
    tab = _table(variant)
    pos = _positions(6, seed=2)
    mod = torch.tensor([0, 0, 0, 1, 1, 1])
    idx = torch.arange(6)
    shifted = pos.clone()
    shifted[:, 1:3] += 0.1
    assert torch.equal(bias_matrix(pos, idx, mod, tab), bias_matrix(shifted, idx + 7, mod, tab))


@settings(max_examples=40)
@given(st.sampled_from(VARIANTS), st.integers(0, 1000), st.integers(0, 100), st.integers(0, 100), st.integers(0, 50))
def test_translation_invariance(variant, seed, sx, sy, si):
    tab = _table(variant, seed=seed % 7)
    pos = _positions(7, seed)
    mod = torch.tensor(np.random.default_rng(seed).integers(0, 2, 7))
    idx = torch.arange(7)
    moved = pos.clone()
    moved[:, 1] += sx / 256
    moved[:, 2] += sy / 256
    assert torch.equal(bias_matrix(pos, idx, mod, tab), bias_matrix(moved, idx + si, mod, tab))


@settings(max_examples=20)
@given(st.integers(0, 1000))
def test_modality_aware_with_equal_subtables_is_joint2d(seed):
    joint = _table(BiasVariant.JOINT2D, heads=3, seed=seed)
    ma = BiasTable(BiasVariant.MODALITY_AWARE, 3)
    with torch.no_grad():
        ma.tm.copy_(joint.t2d[:, None].expand(-1, 4, -1, -1))
    pos = torch.rand(9, 5, generator=torch.Generator().manual_seed(seed))
    mod = torch.tensor(np.random.default_rng(seed).integers(0, 2, 9))
    idx = torch.arange(9)
    assert torch.equal(bias_matrix(pos, idx, mod, ma), bias_matrix(pos, idx, mod, joint))


def test_modality_aware_entries_follow_pair_grid():
    tab = _table(BiasVariant.MODALITY_AWARE)
    pos = _positions(4, seed=5)
    mod = torch.tensor([0, 0, 1, 1])
    b = bias_matrix(pos, torch.arange(4), mod, tab)
    for h in range(2):
        for i in range(4):
            for j in range(4):
                bx = bucketize(float(pos[j, 1] - pos[i, 1]), 33)
                by = bucketize(float(pos[j, 2] - pos[i, 2]), 33)
                pair = ModalityPair.of(int(mod[i]), int(mod[j]))
                assert b[h, i, j] == tab.tm[h, pair, bx, by]


def test_separable_sums_three_lookups():
    tab = _table(BiasVariant.SEPARABLE, max_index_delta=2)
    pos = _positions(5, seed=9)
    idx = torch.tensor([0, 1, 2, 6, 7])
    b = bias_matrix(pos, idx, torch.zeros(5, dtype=torch.long), tab)
    for i in range(5):
        for j in range(5):
            d1 = max(-2, min(2, int(idx[j] - idx[i]))) + 2
            bx = bucketize(float(pos[j, 1] - pos[i, 1]), 33)
            by = bucketize(float(pos[j, 2] - pos[i, 2]), 33)
            assert b[0, i, j] == tab.t1d[0, d1] + tab.tx[0, bx] + tab.ty[0, by]


def test_none_variant_has_no_bias():
    tab = BiasTable(BiasVariant.NONE, 2)
    assert bias_matrix(_positions(3), torch.arange(3), torch.zeros(3, dtype=torch.long), tab) is None
    assert list(tab.parameters()) == []


def test_bias_gradient_occupancy():
    tab = BiasTable(BiasVariant.MODALITY_AWARE, 2)
    pos = _positions(5, seed=3)
    mod = torch.tensor([0, 0, 0, 1, 1])
    idx = torch.arange(5)
    w = torch.randn(2, 5, 5, generator=torch.Generator().manual_seed(0))
    (bias_matrix(pos, idx, mod, tab) * w).sum().backward()
    occupied = torch.zeros_like(tab.tm, dtype=torch.bool)
    for i in range(5):
        for j in range(5):
            bx = bucketize(float(pos[j, 1] - pos[i, 1]), 33)
            by = bucketize(float(pos[j, 2] - pos[i, 2]), 33)
            occupied[:, ModalityPair.of(int(mod[i]), int(mod[j])), bx, by] = True
    assert torch.all(tab.tm.grad[~occupied] == 0)
    assert torch.all(tab.tm.grad[occupied] != 0)


def _attn(d=4, heads=1, seed=0):
    torch.manual_seed(seed)
    return MultiHeadAttention(d, heads)


def test_identical_keys_give_mean_of_values():
    m = _attn()
    with torch.no_grad():
        m.k.weight.zero_()
    x = torch.randn(5, 4)
    out = multi_head_attention(x, None, None, m)
    expected = m.o(m.v(x).mean(0, keepdim=True)).expand(5, 4)
    assert torch.allclose(out, expected, atol=1e-14)


def test_saturating_bias_selects_one_key():
    m = _attn(heads=2)
    x = torch.randn(4, 4)
    bias = torch.zeros(2, 4, 4)
    bias[:, :, 2] = 1000.0
    _, probs = m(x[None], bias[None], None, return_probs=True)
    assert torch.allclose(probs[0, :, :, 2], torch.ones(2, 4))


def test_matches_naive_loops():
    d, H, n = 6, 2, 3
    m = _attn(d, H, seed=4)
    x = torch.randn(n, d)
    bias = torch.randn(H, n, n)
    out = multi_head_attention(x, bias, None, m)
    W = {k: (getattr(m, k).weight.detach().numpy(), getattr(m, k).bias.detach().numpy()) for k in "qkvo"}
    X = x.numpy()
    dk = d // H
    concat = np.zeros((n, d))
    for h in range(H):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            logits = []
            for j in range(n):
                s = 0.0
                for c in range(dk):
                    qi = sum(W["q"][0][sl][c, e] * X[i, e] for e in range(d)) + W["q"][1][sl][c]
                    kj = sum(W["k"][0][sl][c, e] * X[j, e] for e in range(d)) + W["k"][1][sl][c]
                    s += qi * kj
                logits.append(s / math.sqrt(dk) + float(bias[h, i, j]))
            mx = max(logits)
            ex = [math.exp(z - mx) for z in logits]
            p = [e / sum(ex) for e in ex]
            for c in range(dk):
                concat[i, h * dk + c] = sum(
                    p[j] * (sum(W["v"][0][sl][c, e] * X[j, e] for e in range(d)) + W["v"][1][sl][c]) for j in range(n)
                )
    expected = concat @ W["o"][0].T + W["o"][1]
    assert np.abs(out.detach().numpy() - expected).max() < 1e-12


def test_row_shift_leaves_distribution_unchanged():
    m = _attn(heads=2)
    x = torch.randn(1, 5, 4)
    bias = torch.randn(1, 2, 5, 5)
    shifted = bias.clone()
    shifted[0, 1, 3] += 17.0
    _, p1 = m(x, bias, None, return_probs=True)
    _, p2 = m(x, shifted, None, return_probs=True)
    assert torch.allclose(p1, p2, atol=1e-14)


def test_padding_rows_are_zero():
    m = _attn()
    x = torch.randn(1, 4, 4)
    valid = torch.tensor([[True, True, False, True]])
    out, probs = m(x, None, valid, return_probs=True)
    assert torch.all(out[0, 2] == 0)
    assert torch.all(probs[..., 2] == 0)
