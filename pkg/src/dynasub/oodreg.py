"""Downstream classifier, regret scoring over alternative subgroups, and
continual adaptation with a new subgroup."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import controller as ctl
from . import numcore as nc
from . import subgroup as sg
from . import vae as vm
from .metrics import MetricsReport, accuracies

log = logging.getLogger(__name__)


@dataclass
class Classifier:
    """Multinomial logistic regression over Z_dec."""
    W: np.ndarray           # (n_classes, dim)
    b: np.ndarray           # (n_classes,)
    classes: np.ndarray     # label id of each output

    def logits(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.W.T + self.b

    def predict(self, Z) -> np.ndarray:
        return self.classes[self.logits(Z).argmax(axis=1)]


def cross_entropy(logits, targets) -> np.ndarray:
    """Per-row cross-entropy of ``logits`` against integer column targets."""
    lsm = nc.log_softmax(logits, axis=1)
    return -lsm[np.arange(len(targets)), targets]


def ce_grad(W, b, Z, t):
    """Mean cross-entropy and its gradient for a softmax-regression batch."""
    logits = Z @ W.T + b
    lsm = nc.log_softmax(logits, axis=1)
    p = np.exp(lsm)
    p[np.arange(len(t)), t] -= 1.0
    p /= len(t)
    return float(-lsm[np.arange(len(t)), t].mean()), p.T @ Z, p.sum(axis=0)


def fit_classifier(Z, labels, config=None, seed: int = 0, lr: float | None = None,
                   batch: int | None = None, epochs: int | None = None, tol: float = 1e-6,
                   plateau: int = 10) -> Classifier:
    """SGD on cross-entropy; stops after ``epochs`` or when the epoch loss
    improves by less than ``tol`` for ``plateau`` consecutive epochs."""
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    classes, t = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("classifier needs at least two classes")
    lr = lr if lr is not None else (config.classifier_lr if config else 0.01)
    batch = batch if batch is not None else (config.classifier_batch if config else 32)
    epochs = epochs if epochs is not None else (config.classifier_epochs if config else 200)
    rng = nc.rng_stream(seed, "classifier")
    W = rng.normal(0.0, 0.01, size=(len(classes), Z.shape[1]))
    b = np.zeros(len(classes))
    state = nc.OptimizerState("sgd", lr)
    best, stale = np.inf, 0
    for _ in range(epochs):
        perm = rng.permutation(len(Z))
        for s in range(0, len(Z), batch):
            i = perm[s:s + batch]
            _, gW, gb = ce_grad(W, b, Z[i], t[i])
            nc.optimizer_step(state, {"W": W, "b": b}, {"W": gW, "b": gb})
        loss = float(cross_entropy(Z @ W.T + b, t).mean())
        if loss < best - tol:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= plateau:
                break
    return Classifier(W, b, classes)


def regret(Z, C, clf: Classifier, mix, bank, margin: float = 0.1, strategy: str = "classifier",
           x=None, decoder=None):
    """Regret of each row's assigned subgroup against every other active subgroup.

    Returns (R, best_alt, score, losses) where ``losses[:, j]`` is the
    cross-entropy (against the pseudo-label from the assigned subgroup) under
    active slot ``ids[j]`` and ``score = max_{c' != c}(L(c) - L(c'))``, so
    ``R = score + margin``. With a single active subgroup regret is undefined;
    rows get score = -margin and R = 0 so they pass as ID.

    ``strategy="recon"`` replaces the classification loss with the
    reconstruction error of ``x`` under each subgroup (needs ``x`` and
    ``decoder``); ``strategy="entropy"`` ignores alternatives and scores the
    predictive entropy under the assigned subgroup.
    """
    Z = np.asarray(Z, dtype=np.float64)
    C = np.asarray(C)
    ids = mix.active_ids
    if len(ids) < 2:
        warnings.warn("single active subgroup: regret undefined, rows pass as ID")
        return np.zeros(len(Z)), np.full(len(Z), -1), np.full(len(Z), -margin), None
    col = {s: j for j, s in enumerate(ids)}
    own = np.array([col[c] for c in C])
    rows = np.arange(len(Z))

    if strategy == "entropy":
        p = np.exp(nc.log_softmax(clf.logits(vm.modulate(Z, C, bank).data), axis=1))
        score = -(p * np.log(p + 1e-300)).sum(axis=1)
        return score + margin, np.full(len(Z), -1), score, None

    losses = np.empty((len(Z), len(ids)))
    if strategy == "classifier":
        zd_own = vm.modulate(Z, C, bank).data
        pseudo = clf.logits(zd_own).argmax(axis=1)
        for j, k in enumerate(ids):
            zd = vm.modulate(Z, np.full(len(Z), k), bank).data
            losses[:, j] = cross_entropy(clf.logits(zd), pseudo)
    elif strategy == "recon":
        if x is None or decoder is None:
            raise ValueError("recon strategy needs x and decoder")
        for j, k in enumerate(ids):
            zd = vm.modulate(Z, np.full(len(Z), k), bank)
            losses[:, j] = ((decoder(zd).data - x) ** 2).mean(axis=1)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    R, alt, score = regret_from_losses(losses, own, margin)
    return R, ids[alt], score, losses


def regret_from_losses(losses, own, margin: float):
    """R = max_{j != own}(L[own] - L[j]) + margin per row.

    Returns (R, best alternative column, margin-free score).
    """
    losses = np.asarray(losses, dtype=np.float64)
    rows = np.arange(len(losses))
    gap = losses[rows, own][:, None] - losses
    gap[rows, own] = -np.inf
    alt = gap.argmax(axis=1)
    score = gap[rows, alt]
    return score + margin, alt, score


@dataclass
class RegretReport:
    assigned: np.ndarray
    best_alt: np.ndarray
    score: np.ndarray       # margin-free ranking score
    R: np.ndarray
    flag: np.ndarray
    margin: float
    preds: np.ndarray
    is_ood: np.ndarray | None = None

    def __len__(self):
        return len(self.R)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "assigned_cluster", "best_alt", "score", "R", "flag", "is_ood_truth"])
            truth = self.is_ood if self.is_ood is not None else [""] * len(self)
            for i in range(len(self)):
                w.writerow([i, int(self.assigned[i]), int(self.best_alt[i]), repr(float(self.score[i])),
                            repr(float(self.R[i])), int(self.flag[i]),
                            "" if truth[i] == "" else int(truth[i])])


def ood_scores(model, clf: Classifier, x, C=None, margin: float | None = None, is_ood=None,
               strategy: str = "classifier") -> RegretReport:
    """Noise-off regret for every row of ``x``; flag = R > 0.

    ``C`` overrides the model's own assignments (used for baseline swaps).
    """
    margin = model.config.margin if margin is None else margin
    e = model.embed(x)
    C = e.C if C is None else np.asarray(C)
    R, alt, score, _ = regret(e.Z, C, clf, model.mix, model.bank, margin, strategy,
                              x=np.asarray(x), decoder=model.vae.decode)
    preds = clf.predict(model.zdec(e.Z, C))
    return RegretReport(C, alt, score, R, R > 0, margin, preds,
                        None if is_ood is None else np.asarray(is_ood, dtype=bool))


def evaluate(report: RegretReport, labels, is_ood, clusters=None) -> MetricsReport:
    clusters = report.assigned if clusters is None else clusters
    rep = accuracies(report.flag, is_ood, labels, clusters, report.preds, scores=report.score)
    rep.cluster_count = int(len(np.unique(clusters)))
    return rep


@dataclass
class OodBuffer:
    threshold: int = 32
    x: np.ndarray | None = None

    def __len__(self):
        return 0 if self.x is None else len(self.x)

    def add(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        self.x = x if self.x is None else np.vstack([self.x, x])

    @property
    def ready(self) -> bool:
        return len(self) >= self.threshold


@dataclass
class AdaptResult:
    model: object
    classifier: Classifier
    new_cluster: int
    new_label: int
    losses: list


def continual_update(buffer: OodBuffer, model, clf: Classifier, x_train, y_train, config=None,
                     new_label: int | None = None, seed: int = 0) -> AdaptResult | None:
    """Grow a subgroup for buffered OOD rows and retrain the classifier.

    Only the new slot's mixture parameters and modulation slot are trained:
    on the buffer, minimizing the negative log joint of the buffered Z_c
    under the new component plus the reconstruction through the new slot.
    The classifier is refit on the old train embeddings plus the buffer
    embeddings labeled ``new_label``. Returns None below the buffer threshold.
    The input model is left untouched.
    """
    config = config or model.config
    if not buffer.ready:
        return None
    model = model.copy()
    new_label = int(max(clf.classes) + 1) if new_label is None else new_label
    rng = nc.rng_stream(seed, "adapt")
    xb = buffer.x
    e = model.embed(xb)
    # the new subgroup starts on the buffered data rather than far from it
    k = ctl.spawn_cluster(model.mix, model.bank, rng, mean=e.Z_c.mean(axis=0))
    params = {**model.mix.params(), **model.bank.params()}
    masks = {**model.mix.update_masks(), **model.bank.slot_masks([k])}
    for name in model.mix.params():
        only_k = np.zeros_like(masks[name])
        only_k[k] = True
        masks[name] = only_k
    opt = nc.OptimizerState("adam", config.adapt_lr, config.weight_decay)
    losses = []
    n = len(xb)
    for ep in range(config.adapt_epochs):
        perm = rng.permutation(n)
        for s in range(0, n, config.adapt_batch):
            i = perm[s:s + config.adapt_batch]
            nc.zero_grads(params.values())
            mu = nc.take_rows(model.mix.eta_mu, [k])
            ls = nc.take_rows(model.mix.eta_log_sigma, [k])
            d = e.Z_c[i] - mu
            log_lik = ((d * d * nc.exp(ls * -2.0)).sum(axis=1) + ls.sum() * 2.0
                       + model.mix.d2 * sg.LOG_2PI) * -0.5
            lp = nc.take_rows(sg.log_prior(model.mix), [list(model.mix.active_ids).index(k)])
            nll = (log_lik + lp).mean() * -1.0
            zd = vm.modulate(e.Z[i], np.full(len(i), k), model.bank)
            rec = vm.recon_loss(model.vae.decode(zd), xb[i])
            loss = nll + rec
            nc.backward(loss)
            nc.optimizer_step(opt, {n_: t.data for n_, t in params.items()},
                              {n_: t.grad for n_, t in params.items() if t.grad is not None}, masks=masks)
            model.mix.clamp()
            losses.append(float(loss.data))

    # new-subgroup rows are the buffer by construction
    c_buf = np.full(n, k)
    e_tr = model.embed(x_train)
    z_all = np.vstack([e_tr.Z_dec, model.zdec(e.Z, c_buf)])
    y_all = np.concatenate([np.asarray(y_train), np.full(n, new_label)])
    clf_new = fit_classifier(z_all, y_all, config, seed=seed)
    return AdaptResult(model, clf_new, k, new_label, losses)


@dataclass
class ContinualResult:
    buffer_size: int
    buffer_ood_fraction: float
    dropped_acc_before: float
    dropped_acc_after: float
    overall_acc_before: float
    overall_acc_after: float
    new_cluster: int | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def continual_experiment(model, clf: Classifier, dataset, config=None, seed: int = 0,
                         stream_frac: float = 0.5) -> ContinualResult:
    """Stream part of the test split through the detector, buffer the flagged
    rows, adapt once the buffer is full, then score the held-out test rows.

    Accuracies are over the held-out rows; the dropped class counts as correct
    only when predicted as the new label (impossible before adaptation).
    """
    config = config or model.config
    x_te, y_te, ood_te = dataset.part("test")
    x_tr, y_tr, _ = dataset.part("train")
    order = nc.rng_stream(seed, "adapt", 1).permutation(len(x_te))
    cut = int(round(stream_frac * len(order)))
    stream, held = order[:cut], order[cut:]
    rep = ood_scores(model, clf, x_te[stream])
    buf = OodBuffer(config.ood_buffer_threshold)
    if rep.flag.any():
        buf.add(x_te[stream][rep.flag])
    new_label = int(dataset.dropped_class)
    y_true = y_te[held]
    drop = ood_te[held]

    def accs(m, c):
        preds = c.predict(m.embed(x_te[held]).Z_dec)
        ok = preds == y_true
        return float(ok[drop].mean()) if drop.any() else float("nan"), float(ok.mean())

    d0, o0 = accs(model, clf)
    res = continual_update(buf, model, clf, x_tr, y_tr, config, new_label=new_label, seed=seed)
    if res is None:
        return ContinualResult(len(buf), float("nan"), d0, d0, o0, o0, None)
    d1, o1 = accs(res.model, res.classifier)
    frac = float(ood_te[stream][rep.flag].mean())
    return ContinualResult(len(buf), frac, d0, d1, o0, o1, res.new_cluster)
