import os

import numpy as np
import pytest

from twnkit.data import load_idx_pair, subsample
from twnkit.nn import LayerSpec

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA_DIR = os.path.join(REPO_ROOT, "tests", "data")
BUNDLED_MNIST_DIR = os.path.join(REPO_ROOT, "data", "mnist-subset-10k")

# canonical MNIST (user-fetched via scripts/fetch_mnist.py); used by the
# full-protocol acceptance runs when present
MNIST_DIR = os.environ.get("TWNKIT_MNIST_DIR", os.path.join(REPO_ROOT, "data", "mnist"))


def reduced_lenet_specs(mode="ternary"):
    """16-C5 + MP2 + 32-C5 + MP2 + 256-FC + SVM.

    Batch norm after each conv block only; plain (non-squared) hinge on the
    SVM head. Matches configs/mnist-small.cfg.
    """
    return [
        LayerSpec("input", {"shape": (1, 28, 28)}),
        LayerSpec("conv2d", {"out": 16, "kh": 5, "kw": 5, "stride": 1, "pad": 2, "mode": mode}),
        LayerSpec("batch_norm", {}),
        LayerSpec("relu", {}),
        LayerSpec("max_pool2d", {"k": 2}),
        LayerSpec("conv2d", {"out": 32, "kh": 5, "kw": 5, "stride": 1, "pad": 2, "mode": mode}),
        LayerSpec("batch_norm", {}),
        LayerSpec("relu", {}),
        LayerSpec("max_pool2d", {"k": 2}),
        LayerSpec("fully_connected", {"out": 256, "mode": mode}),
        LayerSpec("relu", {}),
        LayerSpec("fully_connected", {"out": 10, "mode": mode}),
        LayerSpec("hinge_loss", {"squared": 0}),
    ]


@pytest.fixture(scope="session")
def bundled_pool():
    """10k genuine MNIST digits shipped with the repo (desk-scale corpus)."""
    return load_idx_pair(
        os.path.join(BUNDLED_MNIST_DIR, "images-idx3-ubyte.gz"),
        os.path.join(BUNDLED_MNIST_DIR, "labels-idx1-ubyte.gz"),
        split="mnist-subset-10k",
    )


@pytest.fixture(scope="session")
def desk_split(bundled_pool):
    """5000 train / 5000 eval class-balanced split of the bundled pool."""
    return subsample(bundled_pool, 500, seed=101, return_rest=True)


def finite_difference_check(
    net,
    X,
    y,
    params=None,
    samples=20,
    eps=1e-3,
    rtol=1e-2,
    noise_floor=5e-3,
    seed=0,
):
    """Central-difference check of analytic gradients on `samples` random
    entries per parameter tensor.

    Probes use train-mode statistics without mutating state. Entries whose
    analytic and FD gradients are both below noise_floor are skipped (float32
    forward noise dominates there, e.g. a bias feeding straight into BN where
    the true gradient is exactly zero); kinks are excluded by a Richardson
    consistency test on the FD estimate itself.
    """
    net.forward(X, y, mode="train")
    net.backward()
    got = {name: (value, grad) for name, value, grad in net.parameters()}
    net._phase = "ready"
    if params is None:
        params = list(got)
    rng = np.random.default_rng(seed)

    def probe(value_flat, i, delta):
        orig = value_flat[i]
        value_flat[i] = orig + delta
        loss = net.forward(X, y, mode="probe").loss
        value_flat[i] = orig
        return loss

    checked = skipped = 0
    for name in params:
        value, grad = got[name]
        fv, fg = value.ravel(), grad.ravel()
        idx = rng.choice(fv.size, size=min(samples, fv.size), replace=False)
        for i in idx:
            fd = (probe(fv, i, eps) - probe(fv, i, -eps)) / (2 * eps)
            fd_half = (probe(fv, i, eps / 2) - probe(fv, i, -eps / 2)) / eps
            if abs(fd - fd_half) > 0.3 * max(abs(fd), abs(fd_half), noise_floor):
                skipped += 1  # kink or tie crossed within the stencil
                continue
            an = float(fg[i])
            if max(abs(fd), abs(an)) < noise_floor:
                skipped += 1
                continue
            rel = abs(fd - an) / max(abs(fd), abs(an))
            if rel > rtol:
                # disambiguate curvature kinks (error scales with eps) from
                # genuine gradient bugs (error persists as eps shrinks)
                small = eps / 8
                fd_s = (probe(fv, i, small) - probe(fv, i, -small)) / (2 * small)
                rel_s = abs(fd_s - an) / max(abs(fd_s), abs(an), noise_floor)
                if rel_s <= rtol:
                    skipped += 1
                    continue
                assert False, (
                    f"{name}[{i}]: fd={fd:.6f} (eps/8: {fd_s:.6f}) analytic={an:.6f} rel={rel_s:.4f}"
                )
            checked += 1
    assert checked >= max(1, (checked + skipped) // 2), (
        f"too few resolvable probes ({checked} checked, {skipped} skipped)"
    )
    return checked
