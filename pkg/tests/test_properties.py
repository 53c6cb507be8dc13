import math

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkf.data import DatasetSource, PartitionSpec, label_entropy, partition_dirichlet, split_train_test
from fedkf.losses import loss_gen_ie, loss_kd_kl
from fedkf.metrics import AccuracyProfile, agnostic_mp, amp, fm, wlp
from fedkf.models import weighted_average
from fedkf.server import aggregate_oca

from helpers import vector_weights

accs = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=12)


@st.composite
def profiles(draw):
    acc = draw(accs)
    sizes = draw(st.lists(st.integers(1, 500), min_size=len(acc), max_size=len(acc)))
    return AccuracyProfile(np.array(acc), np.array(sizes))


@st.composite
def mixtures(draw, k):
    raw = np.array(draw(st.lists(st.floats(0, 1, allow_nan=False), min_size=k, max_size=k)))
    if raw.sum() == 0:
        raw[0] = 1.0
    return raw / raw.sum()


@given(profiles(), st.data())
def test_mixture_never_below_worst_client(p, data):
    mix = data.draw(mixtures(p.num_clients))
    assert agnostic_mp(p, mix) >= wlp(p) - 1e-12


@given(profiles())
def test_amp_is_the_size_mixture(p):
    assert math.isclose(amp(p), agnostic_mp(p, p.test_sizes / p.test_sizes.sum()), abs_tol=1e-12)
    assert wlp(p) - 1e-12 <= amp(p) <= p.per_client_acc.max() + 1e-12


@given(profiles(), st.randoms(use_true_random=False))
def test_permutation_invariance(p, rnd):
    order = list(range(p.num_clients))
    rnd.shuffle(order)
    q = AccuracyProfile(p.per_client_acc[order], p.test_sizes[order])
    assert math.isclose(fm(p), fm(q), abs_tol=1e-15)
    assert math.isclose(amp(p), amp(q), abs_tol=1e-12)
    assert wlp(p) == wlp(q)


@given(accs)
def test_fm_bounds(acc):
    assert 0 <= fm(AccuracyProfile.equal_sizes(acc)) <= 0.25 + 1e-12


@settings(max_examples=40, deadline=None)
@given(
    k=st.integers(1, 8),
    alpha=st.sampled_from([0.01, 0.1, 0.5, 1.0, 10.0]),
    seed=st.integers(0, 10_000),
    classes=st.integers(1, 6),
    per_class=st.integers(5, 30),
)
def test_partition_conserves_and_separates(k, alpha, seed, classes, per_class):
    y = np.repeat(np.arange(classes), per_class)
    src = DatasetSource(np.arange(len(y), dtype=np.float32)[:, None], y, classes, "p")
    spec = PartitionSpec(num_clients=k, alpha=alpha, seed=seed)
    if len(y) < k * spec.min_shard_size:
        return
    shards = partition_dirichlet(src, spec)
    seen = np.concatenate([np.concatenate([s.train_indices, s.test_indices]) for s in shards])
    assert np.array_equal(np.sort(seen), np.arange(len(y)))
    for s in shards:
        assert not set(s.train_indices) & set(s.test_indices)
        assert s.n_train >= 1 and s.n_test >= 1
        assert s.label_counts.sum() == s.n_train + s.n_test
        # features carry their own index, so labels must follow them
        assert np.array_equal(src.labels[s.train_x[:, 0].astype(int)], s.train_y)


@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_conserves(n, frac, seed):
    train, test = split_train_test(np.arange(n), frac, seed)
    assert len(train) >= 1 and len(test) >= 1
    assert sorted(np.concatenate([train, test]).tolist()) == list(range(n))


@given(st.lists(st.lists(st.integers(0, 50), min_size=3, max_size=3), min_size=1, max_size=6))
def test_entropy_bounds(rows):
    h = label_entropy(np.array(rows))
    assert ((h >= -1e-12) & (h <= math.log(3) + 1e-12)).all()


@settings(deadline=None)
@given(st.integers(1, 8), st.integers(1, 50), st.integers(0, 1000))
def test_aggregate_is_a_convex_combination(k, dim, seed):
    rng = np.random.default_rng(seed)
    ws = vector_weights(rng, k, dim)
    sizes = rng.integers(1, 100, k)
    out = aggregate_oca(ws, sizes).entries["w"].numpy()
    stack = np.stack([w.entries["w"].numpy() for w in ws])
    assert (out >= stack.min(0) - 1e-9).all() and (out <= stack.max(0) + 1e-9).all()
    scaled = weighted_average(ws, sizes * 7)
    assert np.abs(scaled.entries["w"].numpy() - out).max() < 1e-9


@settings(deadline=None)
@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 1000))
def test_kl_non_negative_and_ie_bounded(n, c, seed):
    g = torch.Generator().manual_seed(seed)
    t = torch.randn(n, c, generator=g, dtype=torch.float64) * 3
    s = torch.randn(n, c, generator=g, dtype=torch.float64) * 3
    assert float(loss_kd_kl(t, s)) >= -1e-12
    ie = float(loss_gen_ie(torch.softmax(t, 1)))
    assert -math.log(c) - 1e-12 <= ie <= 1e-12
