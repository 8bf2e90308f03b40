"""K-means++ and diagonal-covariance EM-GMM, plus swap-in evaluation against the
dynamic subgrouping head."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6


@dataclass
class KMeansModel:
    centers: np.ndarray
    inertia: float
    history: list = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        return _sqdist(np.asarray(X, dtype=float), self.centers).argmin(axis=1)


@dataclass
class GmmModel:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihood: float
    history: list = field(default_factory=list)

    def log_resp(self, X) -> np.ndarray:
        lj = _diag_log_joint(np.asarray(X, dtype=float), self.means, self.variances, self.weights)
        return lj - _lse(lj)[:, None]

    def predict(self, X) -> np.ndarray:
        return self.log_resp(X).argmax(axis=1)


def _sqdist(X, C):
    return np.maximum((X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :], 0.0)


def _lse(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _diag_log_joint(X, means, variances, weights):
    d = X.shape[1]
    quad = (((X[:, None, :] - means[None]) ** 2) / variances[None]).sum(axis=2)
    return np.log(weights)[None] - 0.5 * (quad + np.log(variances).sum(axis=1)[None] + d * np.log(2 * np.pi))


def _plusplus_seed(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = _sqdist(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        tot = d2.sum()
        idx = rng.integers(len(X)) if tot == 0 else rng.choice(len(X), p=d2 / tot)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sqdist(X, X[idx:idx + 1])[:, 0])
    return np.array(centers)


def lloyd(X, centers, max_iter=100, tol=1e-8):
    """Lloyd iterations from given centers; empty clusters move to the farthest point."""
    centers = centers.copy()
    history = []
    for _ in range(max_iter):
        d = _sqdist(X, centers)
        lab = d.argmin(axis=1)
        history.append(float(d[np.arange(len(X)), lab].sum()))
        new = centers.copy()
        for j in range(len(centers)):
            m = lab == j
            if m.any():
                new[j] = X[m].mean(axis=0)
            else:
                far = d[np.arange(len(X)), lab].argmax()
                new[j] = X[far]
                lab[far] = j
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift < tol:
            break
    d = _sqdist(X, centers)
    inertia = float(d.min(axis=1).sum())
    history.append(inertia)
    return centers, inertia, history


def kmeanspp_fit(X, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 100) -> KMeansModel:
    X = np.asarray(X, dtype=float)
    if k > len(np.unique(X, axis=0)):
        raise ValueError("k exceeds the number of distinct rows")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers, inertia, hist = lloyd(X, _plusplus_seed(X, k, rng), max_iter=max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansModel(centers, inertia, hist)
    return best


def two_means(X, rng: np.random.Generator, restarts: int = 10, max_iter: int = 50) -> KMeansModel:
    """2-means used by the dominant-cluster split; lowest inertia wins."""
    seed = int(rng.integers(2**31))
    return kmeanspp_fit(X, 2, restarts=restarts, seed=seed, max_iter=max_iter)


def gmm_em_fit(X, k: int, restarts: int = 3, seed: int = 0, max_iter: int = 200,
               tol: float = 1e-7) -> GmmModel:
    """EM for a diagonal GMM, initialized from k-means++ seeds."""
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if k > len(np.unique(X, axis=0)):
        raise ValueError("k exceeds the number of distinct rows")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        means = _plusplus_seed(X, k, rng)
        lab = _sqdist(X, means).argmin(axis=1)
        variances = np.tile(np.maximum(X.var(axis=0), VAR_FLOOR), (k, 1))
        weights = np.bincount(lab, minlength=k) + 1.0
        weights = weights / weights.sum()
        hist = []
        prev = -np.inf
        for _ in range(max_iter):
            lj = _diag_log_joint(X, means, variances, weights)
            norm = _lse(lj)
            ll = float(norm.mean())
            hist.append(ll)
            resp = np.exp(lj - norm[:, None])
            nk = resp.sum(axis=0) + 1e-12
            weights = nk / nk.sum()
            means = (resp.T @ X) / nk[:, None]
            variances = np.maximum((resp.T @ (X * X)) / nk[:, None] - means ** 2, VAR_FLOOR)
            if ll - prev < tol:
                break
            prev = ll
        lj = _diag_log_joint(X, means, variances, weights)
        ll = float(_lse(lj).mean())
        model = GmmModel(means, variances, weights, ll, hist + [ll])
        if best is None or model.log_likelihood > best.log_likelihood:
            best = model
    return best


def swap_in_eval(model, dataset, method: str, k: int | None = None, config=None, seed: int = 0):
    """Replace the learned assignments with an external clusterer fit on train Z_c.

    Baseline clusters are mapped onto the model's modulation slots by maximum
    overlap with the model's own train assignments (Hungarian matching); the
    downstream classifier is refit on the swapped train embeddings and the
    test set is scored exactly as for the learned head. ``method="self"``
    uses the model's own assignments. The model is not modified.
    """
    from . import oodreg
    from scipy.optimize import linear_sum_assignment

    x_tr, y_tr, _ = dataset.part("train")
    x_te, y_te, ood_te = dataset.part("test")
    emb_tr, emb_te = model.embed(x_tr), model.embed(x_te)
    ids = model.mix.active_ids
    k = len(ids) if k is None else k
    if method == "self":
        c_tr, c_te = emb_tr.C, emb_te.C
    else:
        if method == "kmeanspp":
            fitted = kmeanspp_fit(emb_tr.Z_c, k, restarts=10, seed=seed)
        elif method == "gmm":
            fitted = gmm_em_fit(emb_tr.Z_c, k, restarts=3, seed=seed)
        else:
            raise ValueError(f"unknown baseline {method!r}")
        b_tr, b_te = fitted.predict(emb_tr.Z_c), fitted.predict(emb_te.Z_c)
        # rows: baseline cluster, cols: model slot
        t = np.zeros((k, len(ids)))
        slot_col = {s: j for j, s in enumerate(ids)}
        np.add.at(t, (b_tr, np.array([slot_col[c] for c in emb_tr.C])), 1)
        r, c = linear_sum_assignment(-t)
        mapping = np.empty(k, dtype=int)
        mapping[r] = ids[c]
        unmatched = np.setdiff1d(np.arange(k), r)
        if len(unmatched):
            # more baseline clusters than slots: fall back to the best-overlap slot
            mapping[unmatched] = ids[t[unmatched].argmax(axis=1)]
        c_tr, c_te = mapping[b_tr], mapping[b_te]
    clf = oodreg.fit_classifier(model.zdec(emb_tr.Z, c_tr), y_tr, config, seed=seed)
    report = oodreg.ood_scores(model, clf, x_te, C=c_te, margin=None if config is None else config.margin,
                               is_ood=ood_te)
    metrics = oodreg.evaluate(report, y_te, ood_te, clusters=c_te)
    metrics.run = method
    return report, metrics
