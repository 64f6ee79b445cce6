import numpy as np
import pytest

from matrix_vdu import experiments as ex
from matrix_vdu.config import RunConfig
from matrix_vdu.pretrain import TASKS

TINY = RunConfig(layers=1, heads=2, d_model=16, max_seq=64, max_image_side=64, vocab_size=128,
                 epochs=1, batch_size=4, warmup_steps=2, learning_rate=1e-3)


@pytest.fixture(scope="module")
def docs():
    return ex.pretrain_docs(8, seed=3)


def test_cached_run_matches_fresh(tmp_path, docs):
    fresh = ex.run_pretraining(TINY, docs, tmp_path)
    again = ex.run_pretraining(TINY, docs, tmp_path)
    assert fresh.warmup_checkpoint.step == TINY.warmup_steps
    assert again.checkpoint.step == fresh.checkpoint.step == 2
    assert again.seconds == pytest.approx(fresh.seconds, abs=1e-3)
    for k, v in fresh.checkpoint.tensors.items():
        np.testing.assert_array_equal(again.checkpoint.tensors[k], v)
    assert [r["total"] for r in again.rows] == pytest.approx([r["total"] for r in fresh.rows], rel=1e-6)


def test_cache_key_separates_configs(tmp_path, docs):
    ex.run_pretraining(TINY, docs, tmp_path)
    ex.run_pretraining(TINY.replace(seed=1), docs, tmp_path)
    assert len(list(tmp_path.glob("pretrain-*-warmup.ckpt"))) == 2


def test_convergence_scores_every_task(docs):
    run = ex.run_pretraining(TINY, docs)
    c = ex.convergence(run, ex.pretrain_docs(4, seed=9))
    assert set(c.start) == set(c.end) == set(TASKS) | {"total"}
    assert c.ltr_constant > 0 and c.ltr_model == c.end["ltr"]
    assert np.isfinite(c.total_drop)


def test_convergence_needs_the_warmup_state(docs):
    run = ex.run_pretraining(TINY, docs)
    run.warmup_checkpoint = None
    with pytest.raises(ValueError, match="warm-up"):
        ex.convergence(run, docs)


def test_ladder_increments_follow_rung_order():
    med = {"text-only": 0.5, "+bias": 0.7, "+spatial": 0.75, "+visual": 0.74}
    inc = dict(ex.ladder_increments(med))
    assert list(inc) == ["+bias", "+spatial", "+visual"]
    assert inc["+bias"] == pytest.approx(0.2) and inc["+visual"] == pytest.approx(-0.01)
