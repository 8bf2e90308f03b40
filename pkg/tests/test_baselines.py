import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.vq import kmeans2

from dynasub import baselines as bl
from dynasub import oodreg as od


def _two_blobs(rng, n=200, sep=6.0, w=0.5):
    n1 = int(n * w)
    a = rng.normal(0, 1, size=(n1, 2))
    b = rng.normal(0, 1, size=(n - n1, 2)) + [sep, 0]
    return np.r_[a, b], np.array([[0.0, 0.0], [sep, 0.0]])


def test_kmeans_k1_is_mean(rng):
    X = rng.normal(size=(30, 3))
    assert np.allclose(bl.kmeanspp_fit(X, 1).centers[0], X.mean(axis=0), atol=1e-12)


def test_kmeans_two_blobs(rng):
    X, true = _two_blobs(rng, n=4000, sep=10.0)
    c = bl.kmeanspp_fit(X, 2).centers
    c = c[np.argsort(c[:, 0])]
    assert np.all(np.abs(c - true) < 0.05 + 3 / np.sqrt(2000))


def test_lloyd_matches_scipy(rng):
    checked = 0
    for _ in range(20):
        X = rng.normal(size=(60, 2)) + rng.integers(3, size=(60, 1)) * 4.0
        init = X[rng.choice(60, 3, replace=False)]
        ours, _, _ = bl.lloyd(X, init, max_iter=300, tol=0.0)
        ref, lab = kmeans2(X, init.copy(), iter=300, minit="matrix", missing="raise")
        if len(np.unique(lab)) < 3:
            continue
        assert np.allclose(ours, ref, atol=1e-10)
        checked += 1
    assert checked >= 15


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5))
def test_lloyd_inertia_nonincreasing(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 2))
    _, _, hist = bl.lloyd(X, X[:k].copy())
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic_and_too_many_clusters(rng):
    X = rng.normal(size=(50, 2))
    assert np.array_equal(bl.kmeanspp_fit(X, 3, seed=2).centers, bl.kmeanspp_fit(X, 3, seed=2).centers)
    with pytest.raises(ValueError):
        bl.kmeanspp_fit(np.zeros((5, 2)), 2)


def test_gmm_k1_is_sample_moments(rng):
    X = rng.normal(size=(100, 3)) * [1, 2, 3]
    g = bl.gmm_em_fit(X, 1)
    assert np.allclose(g.means[0], X.mean(axis=0), atol=1e-10)
    assert np.allclose(g.variances[0], X.var(axis=0), atol=1e-10)
    assert g.weights[0] == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 4))
def test_em_loglik_nondecreasing(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 2)) + rng.integers(3, size=(60, 1)) * 3.0
    g = bl.gmm_em_fit(X, k, restarts=1, seed=seed)
    assert all(b >= a - 1e-9 for a, b in zip(g.history, g.history[1:]))


def test_gmm_recovers_weights(rng):
    X, _ = _two_blobs(rng, n=3000, sep=6.0, w=0.3)
    g = bl.gmm_em_fit(X, 2, seed=0)
    w = g.weights[np.argsort(g.means[:, 0])]
    assert np.all(np.abs(w - [0.3, 0.7]) < 0.05)


def test_gmm_deterministic(rng):
    X, _ = _two_blobs(rng)
    a, b = bl.gmm_em_fit(X, 2, seed=5), bl.gmm_em_fit(X, 2, seed=5)
    assert np.array_equal(a.means, b.means) and a.log_likelihood == b.log_likelihood


# ------------------------------------------------------------ swap-in evaluation

def test_self_swap_reproduces_model_metrics(tiny_run):
    cfg, ds, ck, _ = tiny_run
    model = ck.current_model()
    before = {k: np.array(v, copy=True) for k, v in model.state_dict().items()}
    rep, met = bl.swap_in_eval(model, ds, "self", config=cfg, seed=0)
    x_tr, y_tr, _ = ds.part("train")
    x_te, y_te, o_te = ds.part("test")
    clf = od.fit_classifier(model.embed(x_tr).Z_dec, y_tr, cfg, seed=0)
    direct = od.evaluate(od.ood_scores(model, clf, x_te, is_ood=o_te), y_te, o_te)
    direct.run = "self"
    assert met == direct
    for k, v in model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_baseline_reports_share_schema(tiny_run):
    cfg, ds, ck, _ = tiny_run
    model = ck.current_model()
    keys = None
    for m in ("kmeanspp", "gmm", "self"):
        rep, met = bl.swap_in_eval(model, ds, m, config=cfg, seed=0)
        d = met.to_dict()
        keys = keys or set(d)
        assert set(d) == keys
        assert len(rep) == int(np.sum(ds.split == "test"))
        assert set(np.unique(rep.assigned)) <= set(model.mix.active_ids.tolist())
    with pytest.raises(ValueError):
        bl.swap_in_eval(model, ds, "dbscan", config=cfg)
