import numpy as np
import pytest

from mdmkit.config import MergeConfig, TrainConfig
from mdmkit.errors import PoolError, ShapeError, UnsupportedError
from mdmkit.experts import (build_pool, load_pool, merge_ratio, merge_weights, sample_and_merge,
                            sample_experts, save_pool)
from mdmkit.numerics import Rng
from mdmkit.projector import Checkpoint, init_random
from conftest import SMALL_ARCH


def _shifted(anchor, deltas):
    """Checkpoint whose tensors are anchor + deltas[name]."""
    p = anchor.projector.map_tensors(lambda n, w: w + deltas[n])
    return Checkpoint(0, 1, p)


def _random_deltas(anchor, rng):
    return {n: rng.normal(w.shape) for n, w in anchor.projector.tensors()}


@pytest.fixture
def anchor():
    return Checkpoint(0, 0, init_random(SMALL_ARCH, Rng(0)))


def test_merge_ratio_closed_forms():
    a = np.array([1.0, 0.0])
    assert merge_ratio(a, a) == 1.0
    assert merge_ratio(a, np.array([0.0, 1.0])) == 0.0
    assert merge_ratio(a, -a) == 0.0
    assert merge_ratio(np.zeros(2), a) == 0.0
    b = np.array([0.5, np.sqrt(3) / 2])  # cos = 0.5
    assert merge_ratio(a, b) == pytest.approx(2 / 3, abs=1e-15)
    # obtuse angles clamp to the anchor
    assert merge_ratio(a, np.array([-0.5, np.sqrt(3) / 2])) == 0.0
    with pytest.raises(ShapeError):
        merge_ratio(np.ones(2), np.ones(3))


def test_merge_ratio_is_scale_invariant_and_bounded():
    rng = Rng(1)
    for _ in range(200):
        d1, d2 = rng.normal(6), rng.normal(6)
        t = merge_ratio(d1, d2)
        assert 0.0 <= t <= 1.0
        assert merge_ratio(3.0 * d1, 0.2 * d2) == pytest.approx(t, abs=1e-12)


def test_identical_experts_merge_to_alpha_delta(anchor):
    deltas = _random_deltas(anchor, Rng(2))
    e = _shifted(anchor, deltas)
    merged = merge_weights(anchor, [e, e], 0.3)
    for (n, w), (_, w0) in zip(merged.tensors(), anchor.projector.tensors()):
        np.testing.assert_allclose(w, w0 + 0.3 * deltas[n], atol=1e-12, rtol=0)


@pytest.mark.parametrize("sign", [0.0, -1.0])
def test_orthogonal_and_antiparallel_merge_to_anchor(anchor, sign):
    rng = Rng(3)
    d1 = _random_deltas(anchor, rng)
    if sign == 0.0:
        d2 = {}
        for n, v in d1.items():
            r = rng.normal(v.shape)
            flat = v.ravel()
            r = r - (r.ravel() @ flat) / (flat @ flat) * v
            d2[n] = r
    else:
        d2 = {n: -v for n, v in d1.items()}
    merged = merge_weights(anchor, [_shifted(anchor, d1), _shifted(anchor, d2)], 0.5)
    for (_, w), (_, w0) in zip(merged.tensors(), anchor.projector.tensors()):
        np.testing.assert_allclose(w, w0, atol=1e-12, rtol=0)


def test_alpha_linearity(anchor):
    rng = Rng(4)
    e1 = _shifted(anchor, _random_deltas(anchor, rng))
    e2 = _shifted(anchor, {n: 0.5 * w for n, w in _random_deltas(anchor, rng).items()})
    one = dict(merge_weights(anchor, [e1, e2], 1.0).tensors())
    for alpha in (0.1, 0.5, 0.8):
        m = dict(merge_weights(anchor, [e1, e2], alpha).tensors())
        for n, w0 in anchor.projector.tensors():
            np.testing.assert_allclose(m[n] - w0, alpha * (one[n] - w0), atol=1e-12, rtol=0)


def test_merge_needs_two_experts(anchor):
    with pytest.raises(UnsupportedError):
        merge_weights(anchor, [anchor, anchor, anchor], 0.5)


def test_pool_files_and_roundtrip(tmp_path, small_pool):
    save_pool(tmp_path / "pool", small_pool)
    files = sorted(p.relative_to(tmp_path / "pool").as_posix() for p in (tmp_path / "pool").rglob("*.mdmc"))
    assert len(files) == 1 + 3 * 4 and "expert_2/epoch_4.mdmc" in files
    back = load_pool(tmp_path / "pool")
    assert back.expert_ids == [0, 1, 2] and back.n_epochs == 4
    assert back.meta["data_fingerprint"] == small_pool.meta["data_fingerprint"]
    for eid in back.expert_ids:
        for a, b in zip(back.experts[eid], small_pool.experts[eid]):
            for (_, x), (_, y) in zip(a.projector.tensors(), b.projector.tensors()):
                np.testing.assert_array_equal(x, y.astype(np.float32))


def test_missing_pool(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pool(tmp_path / "nothing")


def test_lr_zero_pool_equals_anchor(small_toy):
    train, _ = small_toy
    with pytest.warns(UserWarning, match="anchor"):
        pool = build_pool(train, SMALL_ARCH, 2, TrainConfig(epochs=2, lr=0.0, batch=32), seed=0)
    for ck in pool.experts[1]:
        for (_, a), (_, b) in zip(ck.projector.tensors(), pool.anchor.projector.tensors()):
            assert np.array_equal(a, b)


def test_expert_training_curve(small_pool):
    for ckpts in small_pool.experts.values():
        assert ckpts[-1].train_loss <= ckpts[0].train_loss


def test_sampling_distinct_and_uniform(small_pool):
    rng = Rng(9)
    cfg = MergeConfig(max_epoch=4)
    epochs = []
    for _ in range(4000):
        picks = sample_experts(small_pool, cfg, rng)
        assert picks[0][0] != picks[1][0]
        epochs.extend(e for _, e in picks)
    counts = np.bincount(epochs, minlength=5)[1:]
    expected = len(epochs) / 4
    assert float(((counts - expected) ** 2 / expected).sum()) < 16.27  # 99.9%, 3 dof


def test_sampling_errors(small_pool):
    with pytest.raises(PoolError):
        sample_experts(small_pool, MergeConfig(max_epoch=10), Rng(0))
    with pytest.raises(PoolError):
        sample_experts(small_pool, MergeConfig(n_experts=4, max_epoch=4), Rng(0))


def test_sample_and_merge_leaves_pool_untouched(small_pool):
    before = {eid: [dict(c.projector.tensors())["image.0.weight"].copy() for c in ck]
              for eid, ck in small_pool.experts.items()}
    model, picks = sample_and_merge(small_pool, MergeConfig(max_epoch=4), Rng(1))
    assert len(picks) == 2
    for eid, ck in small_pool.experts.items():
        for c, w in zip(ck, before[eid]):
            assert np.array_equal(dict(c.projector.tensors())["image.0.weight"], w)
