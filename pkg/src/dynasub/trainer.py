"""Joint training of the VAE and the dynamic subgrouping head."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import controller as ctl
from . import numcore as nc
from . import subgroup as sg
from . import vae as vm
from .datagen import AugmentSpec, Dataset, augment, corrupt, drop_class, make_dataset

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class RunConfig:
    dataset: str = "blobs"
    dropped_class: int | None = None      # None: drawn from the data seed
    seed: int = 0
    n_per_class: int = 1000
    noise_sigma: float | None = None
    d1: int = 80
    d2: int = 5
    latent: int = 16
    k_start: int = 8
    k_max: int = 32
    lambda_elbo: float = 1.0
    lambda_split: float = 3.0
    lambda_ent: float = 3.0
    lambda_usage: float = 0.5
    lambda_klb: float = 2.0
    lambda_aug: float = 0.1
    beta_recon: float = 1.0
    beta_kl: float | None = None          # None: 0.2 for circles, else 1.0
    beta_contrast: float = 100.0
    beta_ortho: float = 10.0
    lr: float = 5e-4
    weight_decay: float = 1 / 500
    t_max: int = 200
    sched_unit: str = "epoch"             # "epoch" | "step"
    batch_size: int = 16
    epochs: int = 120
    subgroup_start_epoch: int = 2
    tau: float = 0.5
    tau_end: float | None = None          # linear anneal tau -> tau_end over the subgroup epochs
    tau2: float = 0.5
    head_lr_scale: float = 1.0            # learning-rate multiplier for the clustering head
    patience: int = 7
    select_start_epoch: int | None = 60    # first epoch eligible for best/patience; None: subgroup start
    jitter_sigma: float = 0.05
    corruption_rate: float = 0.15
    triplet_margin: float = 1.0
    group_positives: bool = True          # same-group members as positives alongside augmented views
    grad_clip: float = 5.0
    margin: float = 0.1
    classifier_lr: float = 0.01
    classifier_batch: int = 32
    classifier_epochs: int = 200
    ood_buffer_threshold: int = 32
    adapt_epochs: int = 30
    adapt_lr: float = 5e-4
    adapt_batch: int = 8

    def __post_init__(self):
        if self.beta_kl is None:
            self.beta_kl = 0.2 if self.dataset == "circles" else 1.0
        if self.sched_unit not in ("epoch", "step"):
            raise ValueError("sched_unit must be 'epoch' or 'step'")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def lambdas(self) -> dict:
        return {"elbo": self.lambda_elbo, "split": self.lambda_split, "ent": self.lambda_ent,
                "usage": self.lambda_usage, "klb": self.lambda_klb, "aug": self.lambda_aug}

    @property
    def betas(self) -> dict:
        return {"recon": self.beta_recon, "kl": self.beta_kl, "contrast": self.beta_contrast,
                "ortho": self.beta_ortho}

    @property
    def augment_spec(self) -> AugmentSpec:
        return AugmentSpec(self.jitter_sigma, self.corruption_rate)


def build_dataset(config: RunConfig) -> Dataset:
    d = make_dataset(config.dataset, config.n_per_class, seed=config.seed, noise_sigma=config.noise_sigma)
    drop = config.dropped_class
    if drop is None:
        drop = int(nc.rng_stream(config.seed, "data", 10**6).integers(6))
    return drop_class(d, drop)


@dataclass
class Embedding:
    H: np.ndarray
    mu: np.ndarray
    log_var: np.ndarray
    Z: np.ndarray
    Z_c: np.ndarray
    C: np.ndarray
    Z_dec: np.ndarray


class DynaSubModel:
    def __init__(self, config: RunConfig):
        self.config = config
        rng = nc.rng_stream(config.seed, "init")
        self.vae = vm.VAE(2, config.d1, config.latent, rng)
        self.bank = vm.ModulationBank(config.k_max, config.latent, rng, init_active=config.k_start)
        self.head = sg.ClusterHead(config.d1, config.d2, rng)
        self.mix = sg.init_mixture(config.k_start, config.d2, rng, capacity=config.k_max, tau=config.tau)

    # parameter groups: the bank belongs to the VAE optimizer
    def vae_params(self) -> dict[str, nc.Tensor]:
        return {**self.vae.params(), **self.bank.params()}

    def subgroup_params(self) -> dict[str, nc.Tensor]:
        return {**self.head.params(), **self.mix.params()}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.vae.params().items()}
        out.update({k: t.data.copy() for k, t in self.head.params().items()})
        out.update({k: np.array(v, copy=True) for k, v in self.bank.state().items()})
        out.update({k: np.array(v, copy=True) for k, v in self.mix.state().items()})
        return out

    def load_state_dict(self, d: dict):
        for k, t in {**self.vae.params(), **self.head.params()}.items():
            t.data[...] = d[k]
        self.bank.load(d)
        self.mix.load(d)

    def copy(self) -> "DynaSubModel":
        m = DynaSubModel.__new__(DynaSubModel)
        m.config = self.config
        m.vae, m.bank, m.head, m.mix = copy.deepcopy((self.vae, self.bank, self.head, self.mix))
        return m

    def embed(self, x, chunk: int = 4096) -> Embedding:
        """Noise-off pipeline: Z = mu, Z_c = mu_c, C = argmax posterior."""
        x = np.asarray(x, dtype=np.float64)
        parts = []
        for s in range(0, max(len(x), 1), chunk):
            xb = x[s:s + chunk]
            H, mu, lv, Z = self.vae.encode(xb)
            _, _, Zc = self.head.project(H)
            C = sg.hard_assign(Zc.data, self.mix)
            Zd = vm.modulate(Z, C, self.bank)
            parts.append((H.data, mu.data, lv.data, Z.data, Zc.data, C, Zd.data))
        return Embedding(*[np.concatenate(p) for p in zip(*parts)])

    def zdec(self, Z, C) -> np.ndarray:
        return vm.modulate(np.asarray(Z), C, self.bank).data

    def reconstruct(self, x) -> np.ndarray:
        e = self.embed(x)
        return self.vae.decode(e.Z_dec).data


def validate(model: DynaSubModel, x_val) -> float:
    """Reconstruction MSE with decoding conditioned on the predicted subgroup."""
    if len(x_val) == 0:
        return float("nan")
    return float(np.mean((model.reconstruct(x_val) - x_val) ** 2))


@dataclass
class Checkpoint:
    """Training snapshot; ``model`` holds the best model, ``current`` the latest."""
    config: RunConfig
    model: dict
    current: dict | None = None
    optimizers: dict = field(default_factory=dict)
    controller: dict | None = None
    next_epoch: int = 0
    best_epoch: int | None = None
    best_val: float = math.inf
    stale: int = 0
    log: list = field(default_factory=list)

    def save(self, path):
        params = {f"best/{k}": v for k, v in self.model.items()}
        if self.current is not None:
            params.update({f"current/{k}": v for k, v in self.current.items()})
        meta = {"config": self.config.to_dict(), "controller": self.controller,
                "next_epoch": self.next_epoch, "best_epoch": self.best_epoch,
                "best_val": None if not math.isfinite(self.best_val) else self.best_val,
                "stale": self.stale, "log": self.log}
        nc.save_checkpoint(path, params, self.optimizers, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        params, opts, meta = nc.load_checkpoint(path)
        best = {k[5:]: v for k, v in params.items() if k.startswith("best/")}
        cur = {k[8:]: v for k, v in params.items() if k.startswith("current/")} or None
        bv = meta.get("best_val")
        return cls(RunConfig.from_dict(meta["config"]), best, cur, opts, meta.get("controller"),
                   meta.get("next_epoch", 0), meta.get("best_epoch"),
                   math.inf if bv is None else bv, meta.get("stale", 0), meta.get("log", []))

    def best_model(self) -> DynaSubModel:
        m = DynaSubModel(self.config)
        m.load_state_dict(self.model)
        return m

    def current_model(self) -> DynaSubModel:
        m = DynaSubModel(self.config)
        m.load_state_dict(self.current if self.current is not None else self.model)
        return m


LOG_FIELDS = ("epoch", "lr", "recon", "kl", "contrast", "ortho", "vae_total", "nll", "kl_assign",
              "split", "entropy", "usage", "kl_balance", "aug", "subgroup_total", "K",
              "silhouette", "val_recon", "edits", "best")


def write_log_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_FIELDS})


def _tau_at(config: RunConfig, epoch: int) -> float:
    if config.tau_end is None:
        return config.tau
    span = max(config.epochs - config.subgroup_start_epoch - 1, 1)
    f = min(max((epoch - config.subgroup_start_epoch) / span, 0.0), 1.0)
    return config.tau + f * (config.tau_end - config.tau)


def _reset_slot_moments(opts: dict, rows):
    for name in ("modbank.W", "modbank.F", "modbank.Fb"):
        opts["vae"].reset_rows(name, rows)
    for name in ("mixture.eta_mu", "mixture.eta_log_sigma", "mixture.raw_pi"):
        opts["subgroup"].reset_rows(name, rows)


def vae_losses(model: DynaSubModel, xb, yb, x_in, x_aug, C, rng, config: RunConfig) -> dict:
    _, mu, lv, Z = model.vae.encode(x_in, rng)
    _, _, _, Z_aug = model.vae.encode(x_aug, rng)
    Z_dec = vm.modulate(Z, C, model.bank)
    x_hat = model.vae.decode(Z_dec)
    return {
        "recon": vm.recon_loss(x_hat, xb),
        "kl": vm.kl_normal(mu, lv),
        "contrast": vm.contrastive_loss(Z, yb, rng, Z_aug=Z_aug, margin=config.triplet_margin,
                                        group_positives=config.group_positives),
        "ortho": vm.ortho_loss(Z, Z_dec),
    }


def subgroup_losses(model: DynaSubModel, H, H_aug, rng, config: RunConfig, tau: float):
    _, _, Zc = model.head.project(H, rng)
    _, _, Zc_aug = model.head.project(H_aug, rng)
    A = sg.assign(Zc, model.mix, tau)
    A_aug = sg.assign(Zc_aug, model.mix, tau)
    losses = {
        "nll": sg.nll_loss(A.log_lik, model.mix),
        "kl": sg.kl_assign_loss(A.log_q, model.mix),
        "split": sg.split_loss(Zc, A.C, config.tau2),
        "entropy": sg.entropy_loss(A.log_q),
        "usage": sg.usage_entropy_loss(A.log_q),
        "kl_balance": sg.kl_balance_loss(A.log_q),
        "aug": sg.aug_consistency_loss(A_aug.log_q, A.log_q.data),
    }
    return losses, Zc.data, A.C


def _finite(losses: dict) -> bool:
    return all(np.isfinite(float(v.data)) for v in losses.values())


def train(config: RunConfig, dataset: Dataset | None = None, resume: Checkpoint | None = None,
          stop_after: int | None = None, progress=None) -> tuple[Checkpoint, list]:
    """Train and return (checkpoint, per-epoch log). ``stop_after`` ends the run
    after that many epochs in total (used to test resumption)."""
    dataset = dataset if dataset is not None else build_dataset(config)
    x_tr, y_tr, _ = dataset.part("train")
    x_val, _, _ = dataset.part("val")
    seed = config.seed

    model = DynaSubModel(config)
    opts = {"vae": nc.OptimizerState("adam", config.lr, config.weight_decay),
            "subgroup": nc.OptimizerState("adam", config.lr, config.weight_decay)}
    state = ctl.ControllerState(k_max=config.k_max)
    ckpt = Checkpoint(config, model.state_dict())
    if resume is not None:
        model.load_state_dict(resume.current if resume.current is not None else resume.model)
        opts = {k: copy.deepcopy(v) for k, v in resume.optimizers.items()}
        if resume.controller is not None:
            state = ctl.ControllerState.from_dict(resume.controller)
        ckpt = copy.deepcopy(resume)
    sched = nc.LrSchedule(config.lr, config.t_max)
    spec = config.augment_spec
    vparams, sparams = model.vae_params(), model.subgroup_params()
    head_scale = {k: config.head_lr_scale for k in model.head.params()}
    n = len(x_tr)
    bs = config.batch_size
    n_batches = max(1, math.ceil(n / bs))
    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    # short runs still get a selectable final epoch
    select_from = min(max(config.subgroup_start_epoch, config.select_start_epoch or 0), config.epochs - 1)

    for epoch in range(ckpt.next_epoch, last_epoch):
        perm = nc.rng_stream(seed, "data", epoch).permutation(n)
        rep_rng = nc.rng_stream(seed, "reparam", epoch)
        aug_rng = nc.rng_stream(seed, "augment", epoch)
        sub_on = epoch >= config.subgroup_start_epoch
        tau = _tau_at(config, epoch)
        sums: dict[str, float] = {}
        zc_epoch, c_epoch = [], []
        epoch_edits = []
        for b in range(n_batches):
            step = epoch * n_batches + b
            lr = cosine_lr_for(sched, config, epoch, step)
            idx = perm[b * bs:(b + 1) * bs]
            xb, yb = x_tr[idx], y_tr[idx]
            x_in = corrupt(xb, spec, aug_rng)
            x_aug = augment(xb, spec, aug_rng)

            C = model.embed(xb).C
            nc.zero_grads(vparams.values())
            vl = vae_losses(model, xb, yb, x_in, x_aug, C, rep_rng, config)
            if not _finite(vl):
                raise DivergenceError(f"non-finite VAE loss at epoch {epoch}", ckpt)
            vtot = vm.vae_total(vl, config.betas)
            nc.backward(vtot)
            nc.clip_grad_norm(vparams.values(), config.grad_clip)
            nc.optimizer_step(opts["vae"], {k: t.data for k, t in vparams.items()},
                              {k: t.grad for k, t in vparams.items() if t.grad is not None}, lr=lr)
            for k, v in vl.items():
                sums[k] = sums.get(k, 0.0) + float(v.data)
            sums["vae_total"] = sums.get("vae_total", 0.0) + float(vtot.data)

            if not sub_on:
                continue
            H = model.vae.encoder(xb).data
            H_aug = model.vae.encoder(x_aug).data
            nc.zero_grads(sparams.values())
            sl, zc, cc = subgroup_losses(model, H, H_aug, rep_rng, config, tau)
            if not _finite(sl):
                raise DivergenceError(f"non-finite subgroup loss at epoch {epoch}", ckpt)
            stot = sg.subgroup_total(sl, config.lambdas)
            nc.backward(stot)
            nc.clip_grad_norm(sparams.values(), config.grad_clip)
            nc.optimizer_step(opts["subgroup"], {k: t.data for k, t in sparams.items()},
                              {k: t.grad for k, t in sparams.items() if t.grad is not None},
                              masks=model.mix.update_masks(), lr=lr, lr_scale=head_scale)
            model.mix.clamp()
            for k, v in sl.items():
                key = "kl_assign" if k == "kl" else k
                sums[key] = sums.get(key, 0.0) + float(v.data)
            sums["subgroup_total"] = sums.get("subgroup_total", 0.0) + float(stot.data)
            zc_epoch.append(zc)
            c_epoch.append(cc)
            e = ctl.maybe_add_cluster(state, model.mix, model.bank, zc, cc,
                                      nc.rng_stream(seed, "controller", state.iteration))
            if e:
                _reset_slot_moments(opts, e.clusters)
                epoch_edits.append(e)

        sil = None
        if sub_on:
            edits = ctl.end_epoch(state, model.mix, model.bank, np.concatenate(zc_epoch),
                                  np.concatenate(c_epoch), nc.rng_stream(seed, "controller", 10**6 + epoch))
            for e in edits:
                _reset_slot_moments(opts, e.clusters)
            epoch_edits += edits
            sil = state.last_silhouette
        val = validate(model, x_val)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", ckpt)
        row = {k: v / n_batches for k, v in sums.items()}
        row.update(epoch=epoch, lr=cosine_lr_for(sched, config, epoch, epoch * n_batches),
                   K=model.mix.K, silhouette=sil, val_recon=val,
                   edits=";".join(f"{e.kind}:{'/'.join(map(str, e.clusters))}" for e in epoch_edits),
                   best=False)
        # checkpoints from before the mixture has had time to settle are not candidates
        eligible = epoch >= select_from
        if eligible and val < ckpt.best_val:
            ckpt.best_val, ckpt.best_epoch, ckpt.stale = val, epoch, 0
            ckpt.model = model.state_dict()
            row["best"] = True
        elif eligible:
            ckpt.stale += 1
        ckpt.log.append(row)
        ckpt.next_epoch = epoch + 1
        if progress:
            progress(row)
        if eligible and ckpt.stale >= config.patience:
            log.info("early stop at epoch %d (best %s)", epoch, ckpt.best_epoch)
            ckpt.next_epoch = config.epochs
            break

    ckpt.current = model.state_dict()
    ckpt.optimizers = {k: copy.deepcopy(v) for k, v in opts.items()}
    ckpt.controller = state.to_dict()
    if ckpt.best_epoch is None:
        ckpt.model = model.state_dict()
    return ckpt, ckpt.log


def cosine_lr_for(sched: nc.LrSchedule, config: RunConfig, epoch: int, step: int) -> float:
    return nc.cosine_lr(sched, epoch if config.sched_unit == "epoch" else step)
