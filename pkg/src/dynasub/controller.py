"""Structural edits of the mixture: cluster addition, dominant-cluster split,
reuse of abandoned clusters and symmetric-KL merging."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .baselines import two_means
from .metrics import silhouette
from .subgroup import INACTIVE_PRIOR, MixtureState

log = logging.getLogger(__name__)

ADD_EVERY = 100
SIL_THRESHOLD = 0.5
VAR_THRESHOLD = 1.5
SPLIT_RATIO = 0.4
SPAWN_LOG_SIGMA = 0.095
SPAWN_PRIOR = 0.001
SPAWN_CANDIDATES = 64
SPAWN_VAR = 2.0
SIL_MAX_POINTS = 2000
MIN_SPLIT_MEMBERS = 4


@dataclass
class Edit:
    epoch: int
    iteration: int
    kind: str             # add | split | reuse | merge
    clusters: list
    trigger: str
    score: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class ControllerState:
    iteration: int = 0
    epoch: int = 0
    k_max: int = 32
    last_silhouette: float | None = None
    prev_used: int | None = None
    counts: np.ndarray | None = None
    count_history: list = field(default_factory=list)   # per-epoch count arrays (full capacity)
    edits: list = field(default_factory=list)
    warnings: int = 0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration, "epoch": self.epoch, "k_max": self.k_max,
            "last_silhouette": self.last_silhouette, "prev_used": self.prev_used,
            "count_history": [c.tolist() for c in self.count_history],
            "edits": [e.__dict__ for e in self.edits], "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerState":
        st = cls(d["iteration"], d["epoch"], d["k_max"], d["last_silhouette"], d["prev_used"])
        st.count_history = [np.asarray(c, dtype=np.int64) for c in d["count_history"]]
        st.edits = [Edit(**e) for e in d["edits"]]
        st.warnings = d.get("warnings", 0)
        return st


def _free_slot(mix: MixtureState) -> int | None:
    free = np.flatnonzero(~mix.active)
    return int(free[0]) if len(free) else None


def spawn_cluster(mix: MixtureState, bank, rng: np.random.Generator, mean=None,
                  log_sigma: float = SPAWN_LOG_SIGMA, prior: float = SPAWN_PRIOR) -> int:
    """Activate a new component (and its modulation slot) and return its id.

    Without an explicit ``mean``, 64 candidates are drawn from N(0, 2 I) and
    the one farthest (max-min distance) from the active means is used.
    """
    k = _free_slot(mix)
    if k is None:
        raise RuntimeError("mixture at capacity")
    existing = mix.eta_mu.data[mix.active_ids]
    if mean is None:
        cand = rng.normal(0.0, math.sqrt(SPAWN_VAR), size=(SPAWN_CANDIDATES, mix.d2))
        if len(existing):
            dmin = np.sqrt(((cand[:, None, :] - existing[None]) ** 2).sum(-1)).min(axis=1)
            mean = cand[int(np.argmax(dmin))]
        else:
            mean = cand[0]
    raw_active = mix.raw_pi.data[mix.active_ids]
    lse = float(np.log(np.exp(raw_active - raw_active.max()).sum()) + raw_active.max())
    mix.eta_mu.data[k] = mean
    mix.eta_log_sigma.data[k] = log_sigma
    # e^r / (S + e^r) = prior
    mix.raw_pi.data[k] = math.log(prior / (1 - prior)) + lse
    mix.active[k] = True
    if bank is not None:
        bank.activate(k)
    return k


def batch_variance_score(Z_c, C, mix: MixtureState) -> float:
    """(1/K) * sum over active clusters of the mean per-dim variance of their rows."""
    Z_c, C = np.asarray(Z_c), np.asarray(C)
    total = 0.0
    for k in mix.active_ids:
        rows = Z_c[C == k]
        if len(rows) >= 2:
            total += float(rows.var(axis=0).mean())
    return total / mix.K


def maybe_add_cluster(state: ControllerState, mix: MixtureState, bank, Z_c, C, rng) -> Edit | None:
    """Cluster addition gate, evaluated every iteration but acting every ADD_EVERY."""
    it = state.iteration
    state.iteration += 1
    if it % ADD_EVERY != 0:
        return None
    sil_available = (state.epoch != 0 and state.last_silhouette is not None
                     and not (state.prev_used is not None and state.prev_used < mix.K))
    if sil_available:
        if state.last_silhouette >= SIL_THRESHOLD:
            return None
        trigger, score = "silhouette", state.last_silhouette
    else:
        score = batch_variance_score(Z_c, C, mix)
        if score <= VAR_THRESHOLD:
            return None
        trigger = "variance"
    if mix.K >= state.k_max or _free_slot(mix) is None:
        state.warnings += 1
        log.warning("cluster cap %d reached; add skipped", state.k_max)
        return None
    k = spawn_cluster(mix, bank, rng)
    e = Edit(state.epoch, it, "add", [k], trigger, score)
    state.edits.append(e)
    return e


def record_epoch(state: ControllerState, mix: MixtureState, C_epoch) -> np.ndarray:
    counts = np.bincount(np.asarray(C_epoch, dtype=np.int64), minlength=mix.capacity)
    state.counts = counts
    state.count_history.append(counts)
    return counts


def find_unused(state: ControllerState, mix: MixtureState | None = None) -> int | None:
    """Active cluster with assignments in some earlier epoch but none in the last two."""
    hist = state.count_history
    if len(hist) < 3:
        return None
    recent = hist[-1] + hist[-2]
    past = np.sum(hist[:-2], axis=0)
    cand = (recent == 0) & (past > 0)
    if mix is not None:
        cand &= mix.active
    ids = np.flatnonzero(cand)
    return int(ids[0]) if len(ids) else None


def split_dominant(state: ControllerState, mix: MixtureState, bank, Z_c_epoch, C_epoch,
                   rng) -> Edit | None:
    Z_c_epoch, C_epoch = np.asarray(Z_c_epoch), np.asarray(C_epoch)
    counts = state.counts if state.counts is not None else np.bincount(C_epoch, minlength=mix.capacity)
    ids = mix.active_ids
    act = counts[ids]
    k = int(ids[np.argmax(act)])
    n_k = int(counts[k])
    rest = int(act.sum()) - n_k
    if not n_k > SPLIT_RATIO * rest:
        return None
    rows = Z_c_epoch[C_epoch == k]
    if len(rows) < MIN_SPLIT_MEMBERS or len(np.unique(rows, axis=0)) < 2:
        return None
    km = two_means(rows, rng)
    m1, m2 = km.centers
    pri = mix.priors()
    half = pri[k] / 2
    u = find_unused(state, mix)
    if u is not None and u != k:
        kind, j = "reuse", u
        mix.eta_log_sigma.data[j] = mix.eta_log_sigma.data[k]
    else:
        if mix.K >= state.k_max or _free_slot(mix) is None:
            state.warnings += 1
            return None
        kind = "split"
        j = _free_slot(mix)
        mix.active[j] = True
        mix.eta_log_sigma.data[j] = SPAWN_LOG_SIGMA
        if bank is not None:
            bank.activate(j)
    mix.eta_mu.data[k] = m1
    mix.eta_mu.data[j] = m2
    pri[k] = half
    pri[j] = half
    mix.set_priors(pri)
    e = Edit(state.epoch, state.iteration, kind, [k, j], "dominant",
             float(n_k / max(rest, 1)))
    state.edits.append(e)
    return e


def sym_kl(mix: MixtureState, i: int, j: int) -> float:
    """Symmetric KL between diagonal components i and j, expanded form
    0.5 * sum_d [(s_i^2 + dmu^2)/s_j^2 + (s_j^2 + dmu^2)/s_i^2 - 2 + log terms].

    This equals KL(i||j) + KL(j||i)."""
    vi = np.exp(2 * mix.eta_log_sigma.data[i])
    vj = np.exp(2 * mix.eta_log_sigma.data[j])
    dmu2 = (mix.eta_mu.data[i] - mix.eta_mu.data[j]) ** 2
    # paired terms are grouped so swapping i and j is bit-identical
    terms = ((vi + dmu2) / vj + (vj + dmu2) / vi) - 2 + (np.log(vj / vi) + np.log(vi / vj))
    return float(0.5 * terms.sum())


def merge_threshold(d2: int) -> float:
    return max(0.5, 0.1 * d2)


def maybe_merge(state: ControllerState, mix: MixtureState, bank) -> Edit | None:
    """Merge the closest active pair if its symmetric KL is below threshold."""
    ids = mix.active_ids
    if len(ids) < 2:
        return None
    thr = merge_threshold(mix.d2)
    pairs = sorted((sym_kl(mix, i, j), int(i), int(j))
                   for a, i in enumerate(ids) for j in ids[a + 1:])
    kl, i, j = pairs[0]
    if not kl < thr:
        return None
    pri = mix.priors()
    pi_i, pi_j = pri[i], pri[j]
    mix.eta_mu.data[i] = (pi_i * mix.eta_mu.data[i] + pi_j * mix.eta_mu.data[j]) / (pi_i + pi_j)
    pri[i] = pi_i + pi_j
    pri[j] = 0.0
    mix.active[j] = False
    mix.eta_log_sigma.data[j] = 1e-6
    mix.set_priors(pri)
    if bank is not None:
        bank.deactivate(j)
    e = Edit(state.epoch, state.iteration, "merge", [i, j], "sym_kl", kl)
    state.edits.append(e)
    return e


def epoch_silhouette(Z_c_epoch, C_epoch, rng=None) -> float | None:
    Z_c_epoch, C_epoch = np.asarray(Z_c_epoch), np.asarray(C_epoch)
    if len(Z_c_epoch) > SIL_MAX_POINTS:
        rng = rng or np.random.default_rng(0)
        sel = rng.choice(len(Z_c_epoch), SIL_MAX_POINTS, replace=False)
        Z_c_epoch, C_epoch = Z_c_epoch[sel], C_epoch[sel]
    return silhouette(Z_c_epoch, C_epoch)


def end_epoch(state: ControllerState, mix: MixtureState, bank, Z_c_epoch, C_epoch, rng) -> list[Edit]:
    """Epoch-boundary bookkeeping: counts, silhouette, one split check, one merge check."""
    counts = record_epoch(state, mix, C_epoch)
    state.last_silhouette = epoch_silhouette(Z_c_epoch, C_epoch, rng)
    state.prev_used = int((counts[mix.active_ids] > 0).sum())
    edits = []
    e = split_dominant(state, mix, bank, Z_c_epoch, C_epoch, rng)
    if e:
        edits.append(e)
    e = maybe_merge(state, mix, bank)
    if e:
        edits.append(e)
    state.epoch += 1
    return edits


def replay_topology(k_start: int, capacity: int, edits) -> np.ndarray:
    """Active-slot mask obtained by replaying an edit log from the initial mixture."""
    active = np.zeros(capacity, dtype=bool)
    active[:k_start] = True
    for e in edits:
        kind = e.kind if isinstance(e, Edit) else e["kind"]
        cl = e.clusters if isinstance(e, Edit) else e["clusters"]
        if kind == "add":
            active[cl[0]] = True
        elif kind == "split":
            active[cl[1]] = True
        elif kind == "merge":
            active[cl[1]] = False
    return active


def write_edit_log(path, edits):
    with open(path, "w") as fh:
        for e in edits:
            fh.write(e.to_json() + "\n")


def read_edit_log(path) -> list[Edit]:
    with open(path) as fh:
        return [Edit(**json.loads(line)) for line in fh if line.strip()]
