import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fuzzyoc.data import ConfigError, DatasetSplit, Sample, one_hot
from fuzzyoc.sampler import (AugmentationPolicy, BatchSchedule, RatioConfig, augment, augment_many,
                             compose_triple, make_batches)

IDENTITY = AugmentationPolicy.identity()


def _pools(n_lab=12, n_unl=20, k=3, size=4):
    # every image carries its own id in pixel (0, 0) so provenance survives identity augmentation
    lab, unl = [], []
    for i in range(n_lab):
        img = np.zeros((size, size, 1), np.float32)
        img[0, 0, 0] = (i + 1) / 1000
        lab.append(Sample(img, one_hot(i % k, k), True, f"l{i}"))
    for i in range(n_unl):
        img = np.zeros((size, size, 1), np.float32)
        img[0, 0, 0] = (n_lab + i + 1) / 1000
        unl.append(Sample(img, None, False, f"u{i}"))
    return DatasetSplit(labeled=lab, unlabeled=unl)


def _ids(views):
    return np.rint(views[:, 0, 0, 0] * 1000).astype(int) - 1


def test_identity_policy_is_identity(rng):
    img = rng.random((8, 8, 3), dtype=np.float32)
    np.testing.assert_allclose(augment(img, IDENTITY, rng), img, atol=1e-6)


def test_augment_deterministic(rng):
    imgs = rng.random((4, 8, 8, 3), dtype=np.float32)
    pol = AugmentationPolicy()
    a = augment_many(imgs, pol, np.random.default_rng(5))
    b = augment_many(imgs, pol, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))


def test_sobel_constant_is_zero():
    pol = AugmentationPolicy(sobel=True)
    out = augment(np.full((8, 8, 3), 0.4, np.float32), pol, np.random.default_rng(0))
    assert out.shape == (8, 8, 2)
    np.testing.assert_allclose(out, 0.0, atol=1e-6)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(crop=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentationPolicy(hue=200.0)
    with pytest.raises(ValueError):
        RatioConfig(r=1.5)


def test_compose_triple_labeled():
    split = _pools()
    full = split.labeled + split.unlabeled
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = split.labeled[int(rng.integers(12))]
        t = compose_triple(x, split.labeled, full, IDENTITY, rng)
        s1, s2, s3 = t.sources
        assert s1 is x and s2 is not x
        assert np.argmax(s2.label.probs) == np.argmax(x.label.probs) == t.label
        assert np.argmax(s3.label.probs) != t.label
        assert t.labeled


def test_compose_triple_unlabeled():
    split = _pools()
    full = split.labeled + split.unlabeled
    x = split.unlabeled[3]
    t = compose_triple(x, split.labeled, full, IDENTITY, np.random.default_rng(1))
    assert not t.labeled and t.label is None
    assert t.sources[0] is x and t.sources[1] is x
    np.testing.assert_array_equal(t.x1, t.x2)


def test_batch_composition_half_ratio():
    split = _pools(n_lab=64, n_unl=100)
    sched = BatchSchedule(split, RatioConfig(0.5, 32, 1), IDENTITY, seed=0)
    assert sched.batches_per_epoch == 4
    batch = sched.batch(0, 0)
    assert batch.labeled.sum() == 16 and (~batch.labeled).sum() == 16
    # window oracle: ceil(100 / 16) = 7 epochs of 4 batches cover every unlabeled index
    seen = set()
    for e in range(7):
        for b in range(4):
            seen.update(int(i) for i in sched.unlabeled_indices(e, b))
    assert seen == set(range(64, 164))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([0.0, 0.25, 0.5]), st.integers(4, 40), st.integers(3, 30), st.integers(1, 60),
       st.integers(0, 1000))
def test_ratio_and_window_property(r, b, n_lab, n_unl, seed):
    split = _pools(n_lab=n_lab, n_unl=n_unl)
    cfg = RatioConfig(r, b, 1)
    sched = BatchSchedule(split, cfg, IDENTITY, seed=seed)
    U = math.floor(r * b)
    for e in range(2):
        for bi in range(sched.batches_per_epoch):
            batch = sched.batch(e, bi)
            assert len(batch) == b
            assert (~batch.labeled).sum() == U
            assert (~batch.labeled).sum() / b <= r
    if U:
        window = math.ceil(n_unl / U)
        seen = set()
        for step in range(window):
            e, bi = divmod(step + seed % 7, sched.batches_per_epoch)
            seen.update(int(i) for i in sched.unlabeled_indices(e, bi))
        assert seen == set(range(n_lab, n_lab + n_unl))


def test_repetitions_have_distinct_draws():
    split = _pools()
    sched = BatchSchedule(split, RatioConfig(0.5, 8, 3), AugmentationPolicy(), seed=0)
    batch = sched.batch(0, 0)
    assert len(batch) == 24
    items, counts = np.unique(batch.items, return_counts=True)
    assert np.all(counts == 3)
    for i in items:
        rows = np.flatnonzero(batch.items == i)
        x1 = batch.x1[rows].reshape(3, -1)
        assert not np.allclose(x1[0], x1[1]) and not np.allclose(x1[1], x1[2])


def test_provenance_in_batches():
    split = _pools()
    sched = BatchSchedule(split, RatioConfig(0.5, 8, 2), IDENTITY, seed=4)
    classes = np.arange(12) % 3
    for b in range(sched.batches_per_epoch):
        batch = sched.batch(0, b)
        for v, x in enumerate((batch.x1, batch.x2, batch.x3)):
            np.testing.assert_array_equal(_ids(x), batch.sources[:, v])
        lab = batch.labeled
        assert np.all(classes[batch.sources[lab, 2]] != batch.labels[lab])
        assert np.all(classes[batch.sources[lab, 1]] == batch.labels[lab])
        assert np.all(batch.sources[~lab, 0] == batch.sources[~lab, 1])
        assert np.all(batch.labels[~lab] == -1)


def test_deterministic_and_resumable():
    split = _pools()
    cfg = RatioConfig(0.5, 8, 2)
    a = list(make_batches(split, cfg, AugmentationPolicy(), seed=9, epochs=2))
    b = list(make_batches(split, cfg, AugmentationPolicy(), seed=9, epochs=2))
    assert len(a) == 2 * 3
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.x3, y.x3)
        np.testing.assert_array_equal(x.sources, y.sources)
    sched = BatchSchedule(split, cfg, AugmentationPolicy(), seed=9)
    np.testing.assert_array_equal(sched.batch(1, 2).x1, a[5].x1)


def test_unsupervised_never_reads_labels():
    split = _pools()
    sched = BatchSchedule(split, RatioConfig(0.5, 8, 1), IDENTITY, seed=0, supervised=False)
    batch = sched.batch(0, 0)
    assert np.all(batch.labels == -1)
    assert np.all(batch.sources[:, 0] == batch.sources[:, 1])


def test_schedule_errors():
    with pytest.raises(ConfigError):
        BatchSchedule(DatasetSplit(), RatioConfig(), IDENTITY)
    with pytest.raises(ConfigError):
        BatchSchedule(_pools(n_unl=0), RatioConfig(0.5, 8, 1), IDENTITY)
    with pytest.raises(ConfigError):
        BatchSchedule(_pools(), RatioConfig(1.0, 8, 1), IDENTITY)
    BatchSchedule(_pools(n_unl=0), RatioConfig(0.0, 8, 1), IDENTITY)
