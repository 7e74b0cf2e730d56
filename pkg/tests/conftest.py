"""Shared helpers: finite differences, random network builders, data fixtures."""

import os

import numpy as np
import pytest

import cactus as C
from cactus import tensor as T

# Central finite differences at this step; analytic must satisfy
# |a - fd| <= ABS_FLOOR + REL_TOL * |fd| per component.
FD_H = 1e-5
FD_REL = 1e-4
FD_ABS = 1e-7


def fd_gradient(loss_fn, param: T.Tensor, h: float = FD_H) -> np.ndarray:
    """Central finite differences of a scalar-valued closure wrt one tensor."""
    orig = param.data.copy()
    g = np.zeros_like(orig)
    for idx in np.ndindex(orig.shape):
        pert = orig.copy()
        pert[idx] += h
        param.data = pert
        lp = float(loss_fn().item())
        pert = orig.copy()
        pert[idx] -= h
        param.data = pert
        lm = float(loss_fn().item())
        param.data = orig
        g[idx] = (lp - lm) / (2.0 * h)
    return g


def analytic_gradients(loss_fn, params):
    with T.Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = loss_fn()
    grads = tape.gradient(loss)
    return {p: grads[p].data for p in params}


def assert_matches_fd(loss_fn, params, rel=FD_REL, floor=FD_ABS, h=FD_H):
    """Assert every component of every parameter gradient matches central FD."""
    analytic = analytic_gradients(loss_fn, params)
    for p in params:
        fd = fd_gradient(loss_fn, p, h=h)
        a = analytic[p]
        bad = np.abs(a - fd) > (floor + rel * np.abs(fd))
        assert not bad.any(), (
            f"gradient mismatch at {np.argwhere(bad)[0]}: "
            f"analytic {a[bad][0]!r} vs fd {fd[bad][0]!r}"
        )


def randomize_biases(net, rng, scale=0.5):
    """Draw nonzero biases so no pre-activation sits exactly on a ReLU kink
    (zero-init biases + column-zeroing masks would put it there exactly,
    where the subgradient convention and one-sided FD legitimately differ)."""
    for (_, role), p in net.params.items():
        if role == "bias":
            p.data = rng.uniform(-scale, scale, p.data.shape)


def random_dense_net(rng, n_in=2, n_out=3, hidden=None, max_hidden=12):
    """Small random MLP (1-3 layers, < 500 params) with random biases."""
    if hidden is None:
        depth = int(rng.integers(0, 3))
        hidden = tuple(int(rng.integers(3, max_hidden)) for _ in range(depth))
    layers = []
    prev = n_in
    for hdim in hidden:
        layers += [C.Dense(prev, hdim), C.ReLU()]
        prev = hdim
    layers.append(C.Dense(prev, n_out))
    net = C.build(layers, seed=int(rng.integers(0, 2**31)), input_shape=(n_in,))
    randomize_biases(net, rng)
    return net


def random_conv_net(rng, in_shape=(1, 6, 6), n_out=3):
    c, h, w = in_shape
    oc = int(rng.integers(2, 5))
    layers = [C.Conv2d(c, oc, kernel=3, stride=1, padding=1), C.ReLU(), C.Flatten(),
              C.Dense(oc * h * w, n_out)]
    net = C.build(layers, seed=int(rng.integers(0, 2**31)), input_shape=in_shape)
    randomize_biases(net, rng)
    return net


def random_batch(rng, net_input, n=4, n_classes=3, lo=0.15, hi=0.85):
    shape = (n,) + tuple(net_input)
    x = rng.uniform(lo, hi, shape)
    y = rng.integers(0, n_classes, n)
    return x, y


@pytest.fixture(scope="session")
def mnist_dataset():
    if not C.mnist_available():
        pytest.skip(
            "MNIST IDX files not present (set CACTUS_MNIST_DIR or place the four "
            "canonical files under ./data/mnist); this environment has no route "
            "to download them"
        )
    return C.load_mnist()


@pytest.fixture()
def tmp_out(tmp_path):
    return str(tmp_path / "out")
