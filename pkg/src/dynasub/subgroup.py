"""Clustering head H -> Z_c, the Gaussian mixture over Z_c and its losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import DenseNet, Tensor

LOG_2PI = math.log(2 * math.pi)
LOG_SIGMA_FLOOR = math.log(1e-4)
INACTIVE_PRIOR = 1e-6


class ClusterHead:
    """Two-layer map D1 -> D1/2 (relu) -> D2, with separate mean and log-std outputs."""

    def __init__(self, d1=80, d2=5, rng=None, init_log_sigma=math.log(0.1)):
        rng = rng or np.random.default_rng(0)
        self.trunk = DenseNet.build([d1, d1 // 2], ["relu"], rng, "cluster.trunk")
        self.mu_head = DenseNet.build([d1 // 2, d2], ["identity"], rng, "cluster.mu")
        self.ls_head = DenseNet.build([d1 // 2, d2], ["identity"], rng, "cluster.log_sigma")
        self.ls_head.layers[0].weight.data *= 0.1
        self.ls_head.layers[0].bias.data[:] = init_log_sigma
        self.d2 = d2

    def params(self) -> dict[str, Tensor]:
        out = {}
        for net in (self.trunk, self.mu_head, self.ls_head):
            out.update(net.params())
        return out

    def project(self, H, rng=None):
        """(mu_c, log_sigma_c, Z_c); ``rng=None`` gives Z_c = mu_c.

        No prior-matching KL term is attached to Z_c anywhere.
        """
        t = self.trunk(H)
        mu_c = self.mu_head(t)
        ls_c = self.ls_head(t)
        return mu_c, ls_c, nc.reparameterize(mu_c, ls_c, rng, mode="cluster")


class MixtureState:
    """Diagonal Gaussian components stored in fixed-capacity slots.

    ``eta_log_sigma`` is the log of the per-dimension standard deviation.
    Priors are the softmax of ``raw_pi`` over active slots.
    """

    def __init__(self, capacity: int, d2: int, k_start: int, tau: float = 1.0):
        self.capacity, self.d2, self.k_start, self.tau = capacity, d2, k_start, tau
        self.eta_mu = Tensor(np.zeros((capacity, d2)), True, "mixture.eta_mu")
        self.eta_log_sigma = Tensor(np.zeros((capacity, d2)), True, "mixture.eta_log_sigma")
        self.raw_pi = Tensor(np.zeros(capacity), True, "mixture.raw_pi")
        self.active = np.zeros(capacity, dtype=bool)

    @property
    def K(self) -> int:
        return int(self.active.sum())

    @property
    def active_ids(self) -> np.ndarray:
        return np.flatnonzero(self.active)

    def params(self) -> dict[str, Tensor]:
        return {"mixture.eta_mu": self.eta_mu, "mixture.eta_log_sigma": self.eta_log_sigma,
                "mixture.raw_pi": self.raw_pi}

    def priors(self) -> np.ndarray:
        """Full-capacity prior vector; inactive slots are exactly 0."""
        p = np.zeros(self.capacity)
        ids = self.active_ids
        p[ids] = nc.softmax_t(self.raw_pi.data[ids])
        return p

    def set_priors(self, target: dict[int, float] | np.ndarray):
        """Rewrite raw_pi so the active softmax realizes ``target`` (renormalized).

        Inactive slots get raw values giving them prior INACTIVE_PRIOR under a
        softmax over all slots.
        """
        ids = self.active_ids
        if isinstance(target, dict):
            p = self.priors()
            for k, v in target.items():
                p[k] = v
        else:
            p = np.asarray(target, dtype=float).copy()
        pa = np.maximum(p[ids], 1e-300)
        pa = pa / pa.sum()
        raw = np.log(pa)
        raw -= raw.max()
        self.raw_pi.data[ids] = raw
        off = ~self.active
        if off.any():
            lse = float(np.log(np.exp(raw).sum()))
            self.raw_pi.data[off] = math.log(INACTIVE_PRIOR) + lse

    def clamp(self):
        np.maximum(self.eta_log_sigma.data, LOG_SIGMA_FLOOR, out=self.eta_log_sigma.data)

    def update_masks(self) -> dict[str, np.ndarray]:
        """Optimizer masks limiting updates to active slots."""
        a = self.active
        return {"mixture.eta_mu": np.repeat(a[:, None], self.d2, axis=1),
                "mixture.eta_log_sigma": np.repeat(a[:, None], self.d2, axis=1),
                "mixture.raw_pi": a.copy()}

    def state(self) -> dict[str, np.ndarray]:
        return {"mixture.eta_mu": self.eta_mu.data, "mixture.eta_log_sigma": self.eta_log_sigma.data,
                "mixture.raw_pi": self.raw_pi.data, "mixture.active": self.active.astype(float),
                "mixture.meta": np.array([self.k_start, self.tau], dtype=float)}

    def load(self, d: dict):
        self.eta_mu.data[...] = d["mixture.eta_mu"]
        self.eta_log_sigma.data[...] = d["mixture.eta_log_sigma"]
        self.raw_pi.data[...] = d["mixture.raw_pi"]
        self.active[:] = np.asarray(d["mixture.active"]) > 0.5
        self.k_start, self.tau = int(d["mixture.meta"][0]), float(d["mixture.meta"][1])

    def copy(self) -> "MixtureState":
        m = MixtureState(self.capacity, self.d2, self.k_start, self.tau)
        m.load({k: np.array(v, copy=True) for k, v in self.state().items()})
        return m


def init_mixture(k_start: int, d2: int, rng: np.random.Generator, capacity: int = 32,
                 tau: float = 1.0) -> MixtureState:
    """Means evenly spaced on [-1, 1] (same value across dims), sigma = 1.1, raw_pi ~ N(0, 1)."""
    if k_start < 2:
        raise ValueError("need at least 2 starting clusters")
    if k_start > capacity:
        raise ValueError("k_start exceeds capacity")
    mix = MixtureState(capacity, d2, k_start, tau)
    mix.eta_mu.data[:k_start] = np.linspace(-1.0, 1.0, k_start)[:, None]
    mix.eta_log_sigma.data[:k_start] = math.log(1.1)
    mix.raw_pi.data[:k_start] = rng.standard_normal(k_start)
    mix.active[:k_start] = True
    mix.raw_pi.data[k_start:] = math.log(INACTIVE_PRIOR) + float(
        np.log(np.exp(mix.raw_pi.data[:k_start]).sum()))
    return mix


def log_component_likelihood(Z_c, mix: MixtureState) -> Tensor:
    """(B, K_active) diagonal-Gaussian log densities, columns in active-slot order."""
    ids = mix.active_ids
    if len(ids) == 0:
        raise nc.StateError("mixture has no active components")
    Z_c = nc.as_tensor(Z_c)
    mu = nc.take_rows(mix.eta_mu, ids)
    ls = nc.take_rows(mix.eta_log_sigma, ids)
    B, D = Z_c.shape
    diff = nc.reshape(Z_c, (B, 1, D)) - nc.reshape(mu, (1, len(ids), D))
    inv_var = nc.exp(ls * -2.0)
    quad = (diff * diff * nc.reshape(inv_var, (1, len(ids), D))).sum(axis=2)
    return (quad + nc.reshape(ls.sum(axis=1), (1, len(ids))) * 2.0 + D * LOG_2PI) * -0.5


def log_prior(mix: MixtureState) -> Tensor:
    """Log-softmax of raw_pi over the active slots."""
    return nc.tlog_softmax(nc.take_rows(mix.raw_pi, mix.active_ids))


@dataclass
class AssignmentBatch:
    log_lik: Tensor
    log_post: Tensor
    log_q: Tensor
    ids: np.ndarray        # active slot id of each column

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.log_q.data)

    @property
    def C(self) -> np.ndarray:
        return self.ids[np.argmax(self.log_post.data, axis=1)]


def assign(Z_c, mix: MixtureState, tau: float | None = None) -> AssignmentBatch:
    tau = mix.tau if tau is None else tau
    if not tau > 0:
        raise ValueError("temperature must be positive")
    log_lik = log_component_likelihood(Z_c, mix)
    log_post = log_lik + nc.reshape(log_prior(mix), (1, mix.K))
    return AssignmentBatch(log_lik, log_post, nc.tlog_softmax(log_post * (1.0 / tau), axis=1),
                           mix.active_ids)


def hard_assign(Z_c: np.ndarray, mix: MixtureState) -> np.ndarray:
    return assign(np.asarray(Z_c), mix).C


# ------------------------------------------------------------------ losses

def nll_loss(log_lik, mix: MixtureState) -> Tensor:
    """Batch mean of -log sum_k pi_k p(z | k)."""
    lp = nc.reshape(log_prior(mix), (1, mix.K))
    return nc.logsumexp(log_lik + lp, axis=1).mean() * -1.0


def kl_assign_loss(log_q, mix: MixtureState) -> Tensor:
    """Batch mean of sum_k q_k (log q_k - log p_k), p = prior over active slots."""
    log_q = nc.as_tensor(log_q)
    lp = nc.reshape(log_prior(mix), (1, mix.K))
    return (nc.exp(log_q) * (log_q - lp)).sum(axis=1).mean()


def split_loss(Z_c, C, tau2: float) -> Tensor:
    """Sum over clusters of max(0, Var_i - tau2 * Var_total).

    Variances are per-dimension population variances averaged over
    dimensions; clusters with fewer than two members contribute nothing.
    """
    Z_c = nc.as_tensor(Z_c)
    C = np.asarray(C)

    def mean_var(t: Tensor) -> Tensor:
        centered = t - t.mean(axis=0, keepdims=True)
        return (centered * centered).mean()

    var_total = mean_var(Z_c)
    total = Tensor(0.0)
    for k in np.unique(C):
        rows = np.flatnonzero(C == k)
        if len(rows) < 2:
            continue
        total = total + nc.relu(mean_var(nc.take_rows(Z_c, rows)) - var_total * tau2)
    return total


def entropy_loss(log_q) -> Tensor:
    """Mean row entropy of the soft assignments (minimized toward confident rows)."""
    log_q = nc.as_tensor(log_q)
    return (nc.exp(log_q) * log_q).sum(axis=1).mean() * -1.0


USAGE_EPS = 1e-8


def usage_entropy_loss(log_q) -> Tensor:
    """Negated entropy of mean cluster usage; minimal when usage is uniform."""
    u = nc.exp(nc.as_tensor(log_q)).mean(axis=0)
    return (u * nc.log(u + USAGE_EPS)).sum()


def kl_balance_loss(log_q) -> Tensor:
    """KL(mean q || uniform over the active clusters)."""
    u = nc.exp(nc.as_tensor(log_q)).mean(axis=0)
    K = u.shape[0]
    return (u * (nc.log(u + 1e-300) + math.log(K))).sum()


def aug_consistency_loss(log_q_aug, log_q_orig) -> Tensor:
    """Batch mean of KL(q_aug || q_orig); q_orig is held constant."""
    log_q_aug = nc.as_tensor(log_q_aug)
    orig = log_q_orig.data if isinstance(log_q_orig, Tensor) else np.asarray(log_q_orig)
    return (nc.exp(log_q_aug) * (log_q_aug - orig)).sum(axis=1).mean()


SUBGROUP_LOSSES = ("nll", "kl", "split", "entropy", "usage", "kl_balance", "aug")


def subgroup_total(losses: dict, lambdas: dict):
    """lambda_elbo*(nll + kl) + the weighted remaining terms."""
    total = lambdas["elbo"] * (losses.get("nll", 0.0) + losses.get("kl", 0.0))
    for k, lam in (("split", "split"), ("entropy", "ent"), ("usage", "usage"),
                   ("kl_balance", "klb"), ("aug", "aug")):
        if k in losses:
            total = total + lambdas[lam] * losses[k]
    return total
