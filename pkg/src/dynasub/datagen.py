"""Six-class simulated datasets, class dropping, corruption and augmentation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

N_CLASSES = 6
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    features: np.ndarray          # raw (N, 2)
    labels: np.ndarray            # (N,) in 0..5
    split: np.ndarray             # (N,) of "train" | "val" | "test"
    is_ood: np.ndarray = None     # (N,) bool
    dropped_class: int | None = None
    name: str = "custom"
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split).astype("<U5")
        if self.is_ood is None:
            self.is_ood = np.zeros(len(self.labels), dtype=bool)
        self.is_ood = np.asarray(self.is_ood, dtype=bool)
        if self.mean is None or self.std is None:
            self._fit_standardizer()

    def _fit_standardizer(self):
        tr = self.features[self.split == "train"]
        if len(tr) == 0:
            tr = self.features
        self.mean = tr.mean(axis=0)
        self.std = tr.std(axis=0)
        self.std[self.std == 0] = 1.0

    def __len__(self):
        return len(self.labels)

    def standardize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def part(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Standardized features, labels and OOD flags of one split."""
        m = self.split == split
        x, y = self.standardize(self.features[m]), self.labels[m]
        if split != "test" and self.dropped_class is not None:
            assert not np.any(y == self.dropped_class), "dropped class leaked into " + split
        return x, y, self.is_ood[m]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f0", "f1", "label", "split", "is_ood"])
            for (f0, f1), y, s, o in zip(self.features, self.labels, self.split, self.is_ood):
                w.writerow([repr(float(f0)), repr(float(f1)), int(y), s, int(o)])

    @classmethod
    def from_csv(cls, path, name="custom") -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        x = np.array([[float(r["f0"]), float(r["f1"])] for r in rows])
        y = np.array([int(r["label"]) for r in rows])
        s = np.array([r["split"] for r in rows])
        o = np.array([bool(int(r["is_ood"])) for r in rows])
        dropped = sorted(set(y[o]))
        return cls(x, y, s, o, dropped[0] if len(dropped) == 1 else None, name)


def _split_tags(labels, rng, test_frac=0.2, val_frac=0.2) -> np.ndarray:
    """Per class: test_frac held out, then val_frac of the remaining pool."""
    tags = np.empty(len(labels), dtype="<U5")
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_frac * len(idx)))
        pool = idx[n_test:]
        n_val = int(round(val_frac * len(pool)))
        tags[idx[:n_test]] = "test"
        tags[pool[:n_val]] = "val"
        tags[pool[n_val:]] = "train"
    return tags


def _finish(x, y, rng, name) -> Dataset:
    order = rng.permutation(len(y))
    x, y = x[order], y[order]
    return Dataset(x, y, _split_tags(y, rng), name=name)


def make_blobs(n_per_class: int = 1000, seed: int = 0, sigma: float = 1.0,
               spacing: float = 10.0) -> Dataset:
    """Six isotropic Gaussians on a hexagon; noise truncated at 4 sigma so
    nearest-centroid separation is guaranteed (half-gap is 5 sigma)."""
    if n_per_class < 50:
        raise ValueError("n_per_class must be >= 50")
    rng = np.random.default_rng(seed)
    ang = np.arange(N_CLASSES) * np.pi / 3
    centers = spacing * np.c_[np.cos(ang), np.sin(ang)]  # adjacent distance == spacing
    xs, ys = [], []
    for c in range(N_CLASSES):
        pts = rng.normal(0.0, sigma, size=(n_per_class, 2))
        bad = np.linalg.norm(pts, axis=1) > 4 * sigma
        while bad.any():
            pts[bad] = rng.normal(0.0, sigma, size=(bad.sum(), 2))
            bad = np.linalg.norm(pts, axis=1) > 4 * sigma
        xs.append(centers[c] + pts)
        ys.append(np.full(n_per_class, c))
    return _finish(np.vstack(xs), np.concatenate(ys), rng, "blobs")


def _moon_pair(n, rng):
    t_out = rng.uniform(0, np.pi, n)
    t_in = rng.uniform(0, np.pi, n)
    outer = np.c_[np.cos(t_out), np.sin(t_out)]
    inner = np.c_[1 - np.cos(t_in), 0.5 - np.sin(t_in)]
    return outer, inner


def make_moons6(n_per_class: int = 1000, noise_sigma: float = 0.1, seed: int = 0,
                offset: float = 4.0) -> Dataset:
    """Three two-moon pairs side by side; pair p holds classes p (upper) and p+3 (lower).

    Labels are interleaved so the two moons of a pair fall in different
    coarse label groups of the contrastive loss.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for p in range(3):
        outer, inner = _moon_pair(n_per_class, rng)
        shift = np.array([offset * p, 0.0])
        xs += [outer + shift, inner + shift]
        ys += [np.full(n_per_class, p), np.full(n_per_class, p + 3)]
    x = np.vstack(xs)
    x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    return _finish(x, np.concatenate(ys), rng, "moons")


CIRCLE_PAIR_SCALES = (0.4, 0.7, 1.0)


def circle_radii(radius: float = 4.0, inner_gap: float = 0.15) -> np.ndarray:
    """Nominal radius per class: pair p has outer ring scale_p*R (class p)
    and inner ring scale_p*R - inner_gap*R (class p+3).

    With this labeling radially adjacent rings never share a coarse label group.
    """
    s = np.array(CIRCLE_PAIR_SCALES) * radius
    return np.r_[s, s - inner_gap * radius]


def make_circles6(n_per_class: int = 1000, noise_sigma: float = 0.05, seed: int = 0,
                  radius: float = 4.0) -> Dataset:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    radii = circle_radii(radius)
    xs, ys = [], []
    for c, r in enumerate(radii):
        t = rng.uniform(0, 2 * np.pi, n_per_class)
        xs.append(r * np.c_[np.cos(t), np.sin(t)])
        ys.append(np.full(n_per_class, c))
    x = np.vstack(xs)
    x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    return _finish(x, np.concatenate(ys), rng, "circles")


GENERATORS = {"blobs": make_blobs, "moons": make_moons6, "circles": make_circles6}


def make_dataset(name: str, n_per_class: int = 1000, seed: int = 0, noise_sigma: float | None = None) -> Dataset:
    if name not in GENERATORS:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS)}")
    if name == "blobs":
        return make_blobs(n_per_class, seed)
    kw = {} if noise_sigma is None else {"noise_sigma": noise_sigma}
    return GENERATORS[name](n_per_class, seed=seed, **kw)


def drop_class(d: Dataset, class_id: int) -> Dataset:
    """Move every row of ``class_id`` into the test split, flagged OOD.

    Standardization statistics are refit on the remaining train rows.
    """
    if d.dropped_class is not None:
        if d.dropped_class == class_id:
            raise ValueError(f"class {class_id} already dropped")
        raise ValueError("dataset already has a dropped class")
    if not np.any(d.labels == class_id):
        raise ValueError(f"class {class_id} not present")
    m = d.labels == class_id
    split = d.split.copy()
    split[m] = "test"
    out = replace(d, split=split, is_ood=d.is_ood | m, dropped_class=int(class_id), mean=None, std=None)
    return out


@dataclass
class AugmentSpec:
    jitter_sigma: float = 0.05
    corruption_rate: float = 0.15

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")


def augment(x, spec: AugmentSpec, rng: np.random.Generator, feature_std=1.0) -> np.ndarray:
    """Gaussian jitter with std jitter_sigma * feature_std."""
    x = np.asarray(x, dtype=np.float64)
    if spec.jitter_sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, 1.0, size=x.shape) * spec.jitter_sigma * np.asarray(feature_std)


def corrupt(x, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Zero each feature independently with probability corruption_rate."""
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= spec.corruption_rate
    return x * keep
