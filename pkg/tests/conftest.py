import numpy as np
import pytest

from dynasub import numcore as nc


def fd_check(build, arrays, n_coords=100, h=1e-6, rng=None, floor=1e-6):
    """Compare tape gradients of ``build(*tensors)`` with central differences.

    ``arrays`` are the inputs; each is wrapped as a grad-requiring tensor.
    Returns the largest relative error over ``n_coords`` random coordinates,
    each error being |a - n| / max(|a|, |n|, floor).
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [nc.Tensor(a.copy(), True) for a in arrays]
    out = build(*ts)
    nc.backward(out)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]
    sizes = np.array([a.size for a in arrays])
    worst = 0.0
    for _ in range(n_coords):
        which = int(rng.choice(len(arrays), p=sizes / sizes.sum()))
        idx = np.unravel_index(int(rng.integers(arrays[which].size)), arrays[which].shape)

        def f(delta):
            shifted = [a.copy() for a in arrays]
            shifted[which][idx] += delta
            return float(build(*[nc.Tensor(s) for s in shifted]).data)

        num = (f(h) - f(-h)) / (2 * h)
        ana = float(grads[which][idx])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_run():
    """A short blobs run shared by the model-level tests: (config, dataset, checkpoint, log)."""
    from dynasub.trainer import RunConfig, build_dataset, train
    cfg = RunConfig(dataset="blobs", seed=0, n_per_class=120, epochs=6, batch_size=32, k_start=6,
                    subgroup_start_epoch=1, patience=50)
    ds = build_dataset(cfg)
    ck, log = train(cfg, ds)
    return cfg, ds, ck, log
