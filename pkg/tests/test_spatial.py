import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from matrix_vdu.encoder import EncoderConfig, MatrixEncoder
from matrix_vdu.numerics import grad_check
from matrix_vdu.spatial import SpatialEmbedder, SpatialFeature, embed_spatial, visual_positions

unit = st.floats(0, 1, allow_nan=False)


def _embedder(seed=0, d=8):
    torch.manual_seed(seed)
    return SpatialEmbedder(d)


def test_identical_positions_identical_embeddings():
    e = _embedder()
    p = SpatialFeature(0.1, 0.2, 0.3, 0.1, 0.05)
    assert torch.equal(embed_spatial(p, e), embed_spatial(p, e))


def test_zero_weights_give_zero_embedding():
    e = _embedder()
    with torch.no_grad():
        for prm in e.parameters():
            prm.zero_()
    out = embed_spatial(torch.rand(6, 5), e)
    assert torch.equal(out, torch.zeros(6, 8))


def test_out_of_range_rejected():
    with pytest.raises(ValueError):
        SpatialFeature(0.0, 1.2, 0.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        embed_spatial(torch.tensor([[0.0, -0.5, 0, 0.1, 0.1]]), _embedder())


def test_layer1_gradient_matches_finite_differences():
    e = _embedder()
    pos = torch.rand(4, 5, generator=torch.Generator().manual_seed(1))
    rep = grad_check(lambda: e(pos).sum(), {"l1.weight": e.l1.weight})
    assert rep.overall < 1e-3


@settings(max_examples=30)
@given(st.lists(unit, min_size=5, max_size=5), st.lists(unit, min_size=5, max_size=5))
def test_lipschitz_bound(p, q):
    e = _embedder(3)
    p, q = torch.tensor(p), torch.tensor(q)
    lhs = torch.linalg.vector_norm(e(p) - e(q)).item()
    assert lhs <= e.lipschitz_bound() * torch.linalg.vector_norm(p - q).item() + 1e-12


def test_one_embedder_serves_both_modalities():
    model = MatrixEncoder(EncoderConfig(layers=1, heads=2, d_model=8, max_image_side=64, vocab_size=16))
    assert sum(1 for m in model.modules() if isinstance(m, SpatialEmbedder)) == 1
    text_pos = torch.tensor([[0.1, 0.2, 0.2, 0.1, 0.1]])
    before = model.spatial(text_pos).clone()
    with torch.no_grad():
        model.spatial.l3.bias.add_(1.0)
    assert torch.allclose(model.spatial(text_pos), before + 1.0)


def test_square_grid_tiles_unit_square():
    feats, valid = visual_positions(2, 2, 1.0, 1.0, 0, 100)
    assert all(valid)
    boxes = [(f.x, f.y, f.w, f.h) for f in feats]
    assert boxes == [(0, 0, 0.5, 0.5), (0.5, 0, 0.5, 0.5), (0, 0.5, 0.5, 0.5), (0.5, 0.5, 0.5, 0.5)]


def test_padded_column_is_invalid():
    feats, valid = visual_positions(2, 2, 0.5, 1.0, 3, 100)
    assert valid == [True, False, True, False]
    assert feats[0].w == 1.0 and feats[2].w == 1.0
    assert feats[0].index_frac == pytest.approx(4 / 100)


def test_sixteen_by_sixteen_grid():
    feats, valid = visual_positions(16, 16, 1.0, 1.0, 0, 1000)
    assert len(feats) == 256 and all(valid)
    assert all(abs(f.w - 1 / 16) < 1e-12 and abs(f.h - 1 / 16) < 1e-12 for f in feats)


@given(st.integers(1, 8), st.integers(1, 8), st.floats(0.05, 1.0), st.floats(0.05, 1.0))
def test_valid_cells_tile_content(gh, gw, fw, fh):
    feats, valid = visual_positions(gh, gw, fw, fh, 0, 1000)
    cells = [f for f, v in zip(feats, valid) if v]
    assert cells
    area = sum(f.w * f.h for f in cells)
    assert area == pytest.approx(1.0, abs=1e-9)
    for f in cells:
        assert f.x + f.w <= 1 + 1e-12 and f.y + f.h <= 1 + 1e-12
    xs = sorted({f.x for f in cells})
    ys = sorted({f.y for f in cells})
    assert xs[0] == 0 and ys[0] == 0
    assert np.all(np.diff(xs) > 0) and np.all(np.diff(ys) > 0)
