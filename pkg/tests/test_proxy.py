import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtg.dataset import make_dataset
from gtg.denoiser import TrainConfig
from gtg.proxy import ProxyModel, filter_top_q, rank_weights, split_indices, train_proxy
from gtg.tasks import CandidateSet


class TableProxy:
    """Looks predictions up from the first design coordinate."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def predict(self, designs):
        return self.values[np.asarray(designs)[:, 0].astype(int)]


def test_rank_weights_ties_all_one():
    assert rank_weights(np.full(7, 2.5)).weights == pytest.approx(np.ones(7), abs=1e-12)


def test_rank_weights_two_points():
    w = rank_weights([0.0, 1.0], k=0.5).weights
    # best (score 1.0) has rank 0 -> 1/1, the other 1/2; rescaled to sum to 2
    assert w == pytest.approx([2 / 3, 4 / 3], abs=1e-15)


def test_rank_weights_uniform_limit():
    w = rank_weights(np.random.default_rng(0).normal(size=50), k=1e9).weights
    assert np.max(np.abs(w - 1.0)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=2, max_size=40), st.floats(1e-3, 10.0))
def test_rank_weights_monotone(scores, k):
    scores = np.asarray(scores, dtype=float)
    w = rank_weights(scores, k).weights
    assert w.sum() == pytest.approx(scores.size)
    order = np.argsort(scores)
    # higher score -> weight at least as large; equal scores -> equal weight
    for a, b in zip(order[:-1], order[1:]):
        if scores[a] == scores[b]:
            assert w[a] == pytest.approx(w[b])
        else:
            assert w[b] > w[a]


def test_split_is_90_10_and_disjoint():
    tr, va = split_indices(1000, 3)
    assert (tr.size, va.size) == (900, 100)
    assert np.intersect1d(tr, va).size == 0


def test_learns_x1_ranking():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(1000, 2))
    ds = make_dataset(x, x[:, 0])
    model, report = train_proxy(ds, TrainConfig(batch_size=128, learning_rate=1e-3,
                                                train_steps=500, seed=0))
    assert report["val_spearman"] >= 0.99
    assert report["n_train"] == 900 and report["n_val"] == 100


def test_constant_training_targets():
    n = 60
    tr, va = split_indices(n, 0)
    scores = np.full(n, 0.5)
    scores[va[0]], scores[va[1]] = 0.0, 1.0  # only held-out rows differ
    rng = np.random.default_rng(1)
    ds = make_dataset(rng.uniform(size=(n, 2)), scores)
    model, _ = train_proxy(ds, TrainConfig(batch_size=32, learning_rate=1e-3, train_steps=2000),
                           hidden=(32, 32), split_seed=0)
    assert np.max(np.abs(model.predict(ds.designs[tr]) - 0.5)) < 1e-2


def test_reweighting_favors_top_scores():
    # A line cannot fit a kink; weighting should trade error on the bulk for the top.
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(2000, 1))
    y = np.where(x[:, 0] > 0.6, 5.0 * (x[:, 0] - 0.6), 0.0) + 0.1 * x[:, 0]
    ds = make_dataset(x, y)
    cfg = TrainConfig(batch_size=256, learning_rate=1e-2, train_steps=1500, seed=0)
    weighted, _ = train_proxy(ds, cfg, weights=rank_weights(ds.scores, 0.01), hidden=())
    plain, _ = train_proxy(ds, cfg, hidden=(), weighted=False)
    top = ds.normalized_scores >= np.quantile(ds.normalized_scores, 0.95)
    err_w = np.abs(weighted.predict(ds.designs[top]) - ds.normalized_scores[top]).mean()
    err_p = np.abs(plain.predict(ds.designs[top]) - ds.normalized_scores[top]).mean()
    assert err_w < err_p


def test_proxy_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    ds = make_dataset(rng.uniform(size=(40, 3)), rng.normal(size=40))
    model, _ = train_proxy(ds, TrainConfig(batch_size=8, learning_rate=1e-3, train_steps=5),
                           hidden=(8,))
    model.save(tmp_path / "p.ckpt")
    back = ProxyModel.load(tmp_path / "p.ckpt")
    assert np.array_equal(back.predict(ds.designs), model.predict(ds.designs))


def _cands(n, d=2):
    designs = np.zeros((n, d))
    designs[:, 0] = np.arange(n)
    return CandidateSet(designs=designs)


def test_filter_top_three():
    out = filter_top_q(_cands(10), TableProxy(np.arange(10.0)), 3)
    assert out.proxy_scores.tolist() == [9.0, 8.0, 7.0]
    assert out.designs[:, 0].tolist() == [9, 8, 7]


def test_filter_q_exceeds_size_is_sorted_identity():
    vals = np.array([0.3, 2.0, -1.0, 0.5])
    out = filter_top_q(_cands(4), TableProxy(vals), 10)
    assert out.designs[:, 0].tolist() == [1, 3, 0, 2]


def test_filter_against_sort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 60))
        q = int(rng.integers(1, 70))
        vals = rng.integers(0, 8, size=n).astype(float)  # frequent ties
        out = filter_top_q(_cands(n), TableProxy(vals), q)
        oracle = sorted(range(n), key=lambda i: (-vals[i], i))[:q]
        assert out.designs[:, 0].astype(int).tolist() == oracle


def test_filter_errors():
    with pytest.raises(ValueError):
        filter_top_q(_cands(3), TableProxy(np.arange(3.0)), 0)
    with pytest.raises(ValueError):
        filter_top_q(CandidateSet(designs=np.zeros((0, 2))), TableProxy(np.arange(3.0)), 1)

