"""Clustering agreement, OOD ranking and accuracy metrics.

Conventions used throughout: OOD is the positive class and a higher score
means "more OOD".
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

REPORT_VERSION = 1


def contingency(labels, clusters) -> np.ndarray:
    _, li = np.unique(np.asarray(labels), return_inverse=True)
    _, ci = np.unique(np.asarray(clusters), return_inverse=True)
    table = np.zeros((li.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(table, (li, ci), 1)
    return table


# fsum keeps the scores bit-identical under any relabeling of the partitions
def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return -math.fsum((p * np.log(p)).tolist())


def nmi(labels, clusters) -> float:
    """I(U;V) / sqrt(H(U) H(V)); 1.0 when both partitions are trivial."""
    labels, clusters = np.asarray(labels), np.asarray(clusters)
    if len(labels) != len(clusters) or len(labels) < 2:
        raise ValueError("need two equal-length assignments with at least 2 items")
    t = contingency(labels, clusters)
    hu, hv = _entropy(t.sum(axis=1)), _entropy(t.sum(axis=0))
    if hu == 0 and hv == 0:
        return 1.0
    if hu == 0 or hv == 0:
        return 0.0
    n = t.sum()
    nz = t > 0
    outer = np.outer(t.sum(axis=1), t.sum(axis=0))
    mi = math.fsum((t[nz] / n * np.log(t[nz] * n / outer[nz])).tolist())
    return max(0.0, mi / math.sqrt(hu * hv))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(labels, clusters) -> float:
    labels, clusters = np.asarray(labels), np.asarray(clusters)
    if len(labels) != len(clusters) or len(labels) < 2:
        raise ValueError("need two equal-length assignments with at least 2 items")
    t = contingency(labels, clusters)
    index = math.fsum(_comb2(t).ravel().tolist())
    a = math.fsum(_comb2(t.sum(axis=1)).tolist())
    b = math.fsum(_comb2(t.sum(axis=0)).tolist())
    expected = a * b / _comb2(t.sum())
    max_index = (a + b) / 2
    if max_index == expected:
        return 1.0
    return float((index - expected) / (max_index - expected))


def silhouette(X, labels) -> float | None:
    """Mean of (b - a) / max(a, b); singleton points score 0.

    Returns None with fewer than two non-empty clusters.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        return None
    D = cdist(X, X)
    onehot = np.zeros((len(X), len(uniq)))
    onehot[np.arange(len(X)), inv] = 1.0
    sizes = onehot.sum(axis=0)
    sums = D @ onehot                                   # distance sums to each cluster
    own = sizes[inv]
    a = sums[np.arange(len(X)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(len(X)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def auroc(scores, is_ood) -> float | None:
    """Mann-Whitney rank statistic with average ranks for ties."""
    scores, y = np.asarray(scores, dtype=np.float64), np.asarray(is_ood, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(scores)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def fpr_at_95(scores, is_ood, tpr_target: float = 0.95) -> float | None:
    """FPR at the largest threshold whose TPR (score >= thr) reaches the target."""
    scores, y = np.asarray(scores, dtype=np.float64), np.asarray(is_ood, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    pos = np.sort(scores[y])[::-1]
    k = int(math.ceil(tpr_target * n_pos - 1e-12))
    thr = pos[k - 1]
    return float((scores[~y] >= thr).sum() / n_neg)


def hungarian_accuracy(labels, clusters) -> float:
    """Best one-to-one cluster->label matching accuracy."""
    t = contingency(labels, clusters)
    r, c = linear_sum_assignment(-t)
    return float(t[r, c].sum() / t.sum())


def cluster_label_map(clusters, labels) -> dict:
    """One-to-one map cluster id -> label maximizing agreement."""
    cu, lu = np.unique(clusters), np.unique(labels)
    t = contingency(labels, clusters)
    r, c = linear_sum_assignment(-t)
    return {cu[j]: lu[i] for i, j in zip(r, c)}


def regret_precision(flags, is_ood) -> float | None:
    flags, y = np.asarray(flags, dtype=bool), np.asarray(is_ood, dtype=bool)
    if flags.sum() == 0:
        return None
    return float((flags & y).sum() / flags.sum())


@dataclass
class MetricsReport:
    id_accuracy: float | None = None
    cluster_accuracy: float | None = None
    class_ood_accuracy: float | None = None
    nmi: float | None = None
    ari: float | None = None
    auroc: float | None = None
    fpr_at_95: float | None = None
    regret_precision: float | None = None
    flagged_id_fraction: float | None = None
    cluster_count: int | None = None
    silhouette: float | None = None
    run: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["_version"] = REPORT_VERSION
        d["_convention"] = "OOD=positive; higher score = more OOD"
        return d

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            w.writerow(["" if v is None else v for v in (getattr(self, c) for c in self.columns())])

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d.get(k) for k in cls.columns()})


def accuracies(flags, is_ood, labels, clusters, preds, scores=None, ood_label=None) -> MetricsReport:
    """Fill the report from per-row test outputs.

    ``preds`` are classifier predictions; ID accuracy is taken over non-OOD
    rows. NMI/ARI and the aligned cluster accuracy are computed on ID rows.
    """
    flags, y = np.asarray(flags, dtype=bool), np.asarray(is_ood, dtype=bool)
    labels, clusters, preds = np.asarray(labels), np.asarray(clusters), np.asarray(preds)
    idr = ~y
    rep = MetricsReport()
    if idr.any():
        rep.id_accuracy = float((preds[idr] == labels[idr]).mean())
        rep.flagged_id_fraction = float(flags[idr].mean())
        if idr.sum() >= 2:
            rep.nmi = nmi(labels[idr], clusters[idr])
            rep.ari = ari(labels[idr], clusters[idr])
            rep.cluster_accuracy = hungarian_accuracy(labels[idr], clusters[idr])
    if y.any():
        rep.class_ood_accuracy = float(flags[y].mean())
    rep.regret_precision = regret_precision(flags, y)
    if scores is not None:
        rep.auroc = auroc(scores, y)
        rep.fpr_at_95 = fpr_at_95(scores, y)
    return rep
