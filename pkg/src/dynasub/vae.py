"""Encoder, decoder, per-cluster adaptive modulation and the representation losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import DenseNet, Tensor

# contiguous thirds of the six class ids
LABEL_GROUPS = np.array([0, 0, 1, 1, 2, 2])
NOISE_NEGATIVE_SEED = 12345


@dataclass
class LatentBundle:
    H: np.ndarray
    mu: np.ndarray
    log_sigma: np.ndarray
    Z: np.ndarray
    Z_dec: np.ndarray
    C: np.ndarray


class VAE:
    """Dense encoder 2 -> D1 (relu), Gaussian heads D1 -> L, decoder L -> D1 (relu) -> 2."""

    def __init__(self, in_dim=2, d1=80, latent=16, rng=None):
        rng = rng or np.random.default_rng(0)
        self.encoder = DenseNet.build([in_dim, d1], ["relu"], rng, "enc.body")
        self.mu_head = DenseNet.build([d1, latent], ["identity"], rng, "enc.mu")
        self.logvar_head = DenseNet.build([d1, latent], ["identity"], rng, "enc.logvar")
        self.decoder = DenseNet.build([latent, d1, in_dim], ["relu", "identity"], rng, "dec")
        self.in_dim, self.d1, self.latent = in_dim, d1, latent

    def params(self) -> dict[str, Tensor]:
        out = {}
        for net in (self.encoder, self.mu_head, self.logvar_head, self.decoder):
            out.update(net.params())
        return out

    def encode(self, x, rng=None):
        """Return (H, mu, log_var, Z) tensors. ``rng=None`` means Z = mu."""
        x = nc.as_tensor(x)
        if not np.all(np.isfinite(x.data)):
            raise ValueError("non-finite encoder input")
        H = self.encoder(x)
        mu = self.mu_head(H)
        log_var = self.logvar_head(H)
        return H, mu, log_var, nc.reparameterize(mu, log_var, rng, mode="vae")

    def decode(self, z_dec) -> Tensor:
        return self.decoder(z_dec)


class ModulationBank:
    """Per-cluster scale vectors and residual dense layers, stacked by slot id."""

    def __init__(self, capacity: int, latent: int, rng=None, init_active=0, init_scale=0.1):
        rng = rng or np.random.default_rng(0)
        self.capacity, self.latent = capacity, latent
        self.W = Tensor(np.zeros((capacity, latent)), True, "modbank.W")
        self.F = Tensor(np.zeros((capacity, latent, latent)), True, "modbank.F")
        self.Fb = Tensor(np.zeros((capacity, latent)), True, "modbank.Fb")
        self.active = np.zeros(capacity, dtype=bool)
        for k in range(init_active):
            self.F.data[k] = rng.normal(0.0, init_scale / math.sqrt(latent), size=(latent, latent))
            self.active[k] = True

    def params(self) -> dict[str, Tensor]:
        return {"modbank.W": self.W, "modbank.F": self.F, "modbank.Fb": self.Fb}

    def activate(self, k: int):
        """Fresh slot: W = 0 (scale sqrt(ln 2)) and a zero residual layer."""
        self.W.data[k] = 0.0
        self.F.data[k] = 0.0
        self.Fb.data[k] = 0.0
        self.active[k] = True

    def deactivate(self, k: int):
        self.active[k] = False

    def slot_masks(self, rows) -> dict[str, np.ndarray]:
        """Boolean update masks selecting the given slot rows of every bank tensor."""
        out = {}
        for name, t in self.params().items():
            m = np.zeros(t.shape, dtype=bool)
            m[rows] = True
            out[name] = m
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Checkpoint slots ``modbank.k{i}.*`` for every slot."""
        out = {"modbank.active": self.active.astype(float)}
        for k in range(self.capacity):
            out[f"modbank.k{k}.W"] = self.W.data[k]
            out[f"modbank.k{k}.f_inc.weight"] = self.F.data[k]
            out[f"modbank.k{k}.f_inc.bias"] = self.Fb.data[k]
        return out

    def load(self, d: dict):
        self.active[:] = np.asarray(d["modbank.active"]) > 0.5
        for k in range(self.capacity):
            self.W.data[k] = d[f"modbank.k{k}.W"]
            self.F.data[k] = d[f"modbank.k{k}.f_inc.weight"]
            self.Fb.data[k] = d[f"modbank.k{k}.f_inc.bias"]


def modulate(Z, C, bank: ModulationBank) -> Tensor:
    """Z_dec[i] = sqrt(softplus(W[C_i])) * Z[i] + F[C_i] @ Z[i] + Fb[C_i]."""
    Z = nc.as_tensor(Z)
    C = np.asarray(C, dtype=np.intp)
    if C.shape != (Z.shape[0],):
        raise nc.ShapeError(f"cluster ids {C.shape} vs batch {Z.shape[0]}")
    if not np.all(bank.active[C]):
        bad = sorted(set(C[~bank.active[C]].tolist()))
        raise ValueError(f"inactive cluster ids {bad}")
    g = nc.sqrt(nc.tsoftplus(nc.take_rows(bank.W, C)))
    inc = nc.bmv(nc.take_rows(bank.F, C), Z) + nc.take_rows(bank.Fb, C)
    return g * Z + inc


def recon_loss(x_hat, x_orig) -> Tensor:
    """Mean squared error against the uncorrupted input."""
    return nc.tmean((nc.as_tensor(x_hat) - x_orig) ** 2)


def kl_normal(mu, log_var) -> Tensor:
    """Batch mean of KL(N(mu, exp(log_var)) || N(0, I))."""
    mu, log_var = nc.as_tensor(mu), nc.as_tensor(log_var)
    per = (nc.exp(log_var) + mu * mu - 1.0 - log_var).sum(axis=1) * 0.5
    return per.mean()


def _noise_negative(latent: int) -> np.ndarray:
    v = np.random.default_rng(NOISE_NEGATIVE_SEED).standard_normal(latent)
    return v / np.linalg.norm(v)


def _dist(a: Tensor, b) -> Tensor:
    return nc.sqrt(((a - b) ** 2).sum(axis=1) + 1e-12)


@dataclass
class ContrastStats:
    degenerate_batches: int = 0


CONTRAST_STATS = ContrastStats()


def contrastive_loss(Z, labels, rng: np.random.Generator, Z_aug=None, margin: float = 1.0,
                     groups=LABEL_GROUPS, group_positives: bool = True) -> Tensor:
    """Triplet loss over coarse label groups.

    Each anchor gets a negative drawn from a different group in the batch, or
    the fixed noise embedding scaled to the batch's mean norm when no such
    member exists. Positives: the augmented view (when given) and a random
    same-group batch member (when one exists); every formed triplet counts
    once in the mean. With ``group_positives=False`` a same-group member is
    used only when no augmented view is given.
    """
    Z = nc.as_tensor(Z)
    B = Z.shape[0]
    if B < 2:
        CONTRAST_STATS.degenerate_batches += 1
        return Tensor(0.0)
    g = np.asarray(groups)[np.asarray(labels)]
    same = g[:, None] == g[None, :]
    np.fill_diagonal(same, False)
    diff = g[:, None] != g[None, :]

    # uniform pick among candidates: argmax of iid uniforms over the allowed set
    r = rng.random((2, B, B))
    neg_idx = np.where(diff.any(axis=1), np.argmax(np.where(diff, r[0], -1.0), axis=1), -1)
    pos_idx = np.where(same.any(axis=1), np.argmax(np.where(same, r[1], -1.0), axis=1), -1)

    has_neg = neg_idx >= 0
    if has_neg.all():
        neg = nc.take_rows(Z, neg_idx)
    else:
        scale = float(np.mean(np.linalg.norm(Z.data, axis=1)))
        noise = np.broadcast_to(_noise_negative(Z.shape[1]) * scale, Z.shape)
        safe = np.where(has_neg, neg_idx, 0)
        m = has_neg[:, None].astype(float)
        neg = nc.take_rows(Z, safe) * m + noise * (1.0 - m)
    d_neg = _dist(Z, neg)

    terms = []
    if Z_aug is not None:
        terms.append(nc.relu(_dist(Z, Z_aug) - d_neg + margin))
    has_pos = pos_idx >= 0
    if Z_aug is not None and not group_positives:
        has_pos[:] = False
    if has_pos.any():
        rows = np.flatnonzero(has_pos)
        a = nc.take_rows(Z, rows)
        p = nc.take_rows(Z, pos_idx[rows])
        terms.append(nc.relu(_dist(a, p) - nc.take_rows(d_neg, rows) + margin))
    if not terms:
        # anchor is its own positive
        terms.append(nc.relu(margin - d_neg))
    total = sum(t.sum() for t in terms)
    return total * (1.0 / sum(t.shape[0] for t in terms))


def ortho_loss(Z, Z_dec) -> Tensor:
    """Mean absolute cosine similarity between Z and Z_dec rows."""
    Z, Z_dec = nc.as_tensor(Z), nc.as_tensor(Z_dec)
    dot = (Z * Z_dec).sum(axis=1)
    nz = nc.sqrt((Z * Z).sum(axis=1))
    nd = nc.sqrt((Z_dec * Z_dec).sum(axis=1))
    return nc.tabs(dot / (nz * nd + 1e-12)).mean()


VAE_LOSSES = ("recon", "kl", "contrast", "ortho")


def vae_total(losses: dict, betas: dict):
    return sum(betas[k] * losses[k] for k in VAE_LOSSES if k in losses)
