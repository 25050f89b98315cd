"""Central finite-difference checks of every backward kernel, in float64."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import layers as L
from .network import NetworkConfig, init_params, loss_and_grads

EPS = 1e-5
THRESHOLD = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric) -> float:
    """Max elementwise |a - n| / max(|a|, |n|).

    Elements where both values are below 1e-3 of the tensor's largest gradient
    are compared against that floor instead, since there the finite-difference
    rounding error dominates any relative measure.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float((np.abs(a - n) / denom).max())


def _projected(fwd, g):
    # scalar L = sum(out * g), so dL/dout = g
    return lambda: float(np.sum(fwd() * g))


def check_conv2d(rng) -> float:
    x = rng.normal(size=(2, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out, cache = L.conv2d_forward(x, w, b)
    g = rng.normal(size=out.shape)
    dx, dw, db = L.conv2d_backward(g, cache)
    f = _projected(lambda: L.conv2d_forward(x, w, b)[0], g)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
               rel_error(db, numeric_grad(f, b)))


def check_batchnorm(rng) -> float:
    x = rng.normal(1.0, 2.0, size=(2, 4, 4, 3))
    gamma = rng.normal(1.0, 0.5, size=3)
    beta = rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    out, cache, _, _ = L.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
    g = rng.normal(size=out.shape)
    dx, dgamma, dbeta = L.batchnorm_backward(g, cache)
    f = _projected(lambda: L.batchnorm_forward(x, gamma, beta, rm, rv, train=True)[0], g)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dgamma, numeric_grad(f, gamma)),
               rel_error(dbeta, numeric_grad(f, beta)))


def check_batchnorm_dense(rng) -> float:
    x = rng.normal(0.5, 1.5, size=(6, 4))
    gamma = rng.normal(1.0, 0.5, size=4)
    beta = rng.normal(size=4)
    rm, rv = np.zeros(4), np.ones(4)
    out, cache, _, _ = L.batchnorm_forward(x, gamma, beta, rm, rv, train=True)
    g = rng.normal(size=out.shape)
    dx, _, _ = L.batchnorm_backward(g, cache)
    f = _projected(lambda: L.batchnorm_forward(x, gamma, beta, rm, rv, train=True)[0], g)
    return rel_error(dx, numeric_grad(f, x))


def check_maxpool2(rng) -> float:
    h, w = rng.integers(2, 9, size=2)
    shape = (2, int(h), int(w), 2)
    # distinct values spaced well beyond EPS so no window max is ambiguous
    x = rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.uniform(0, 1e-3, size=shape)
    out, cache = L.maxpool2_forward(x)
    g = rng.normal(size=out.shape)
    dx = L.maxpool2_backward(g, cache)
    f = _projected(lambda: L.maxpool2_forward(x)[0], g)
    return rel_error(dx, numeric_grad(f, x))


def check_dense(rng) -> float:
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    out, cache = L.dense_forward(x, w, b)
    g = rng.normal(size=out.shape)
    dx, dw, db = L.dense_backward(g, cache)
    f = _projected(lambda: L.dense_forward(x, w, b)[0], g)
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, w)),
               rel_error(db, numeric_grad(f, b)))


def _check_activation(kind):
    def check(rng) -> float:
        x = rng.normal(0.0, 2.0, size=(4, 6))
        # keep clear of the ReLU kink
        x = np.where(np.abs(x) < 1e-3, np.sign(x + 1e-12) * 1e-2, x)
        out, cache = L.activation_forward(x, kind)
        g = rng.normal(size=out.shape)
        dx = L.activation_backward(g, cache)
        f = _projected(lambda: L.activation_forward(x, kind)[0], g)
        return rel_error(dx, numeric_grad(f, x))
    return check


def check_softmax_xent(rng) -> float:
    logits = rng.normal(0.0, 3.0, size=(4, 7))
    labels = rng.integers(0, 7, size=4)
    _, d, _ = L.softmax_xent(logits, labels)
    return rel_error(d, numeric_grad(lambda: L.softmax_xent(logits, labels)[0], logits))


def check_network(rng, activation="elu") -> float:
    """End-to-end gradient of a miniature network (same layer code, 8x8 input)."""
    cfg = NetworkConfig(input_channels=3, conv_widths=(2, 3, 2), dense_widths=(4, 3),
                        activation=activation, image_size=8)
    params = init_params(cfg, int(rng.integers(2 ** 31)), dtype=np.float64)
    for k in params.weights:
        if k.endswith("/bias") or k.endswith("/beta"):
            params.weights[k] += rng.normal(0, 0.1, size=params.weights[k].shape)
    x = rng.uniform(0, 1, size=(4, 8, 8, 3))
    y = rng.integers(0, 7, size=4)
    _, grads, _ = loss_and_grads(params, x, y, update_state=False)

    def f():
        return loss_and_grads(params, x, y, update_state=False)[0]
    # one floor for all tensors: conv biases ahead of batch norm have zero gradient
    names = list(params.weights)
    numeric = [numeric_grad(f, params.weights[k]).ravel() for k in names]
    return rel_error(np.concatenate([grads[k].ravel() for k in names]), np.concatenate(numeric))


KERNELS = {
    "conv2d": check_conv2d,
    "batchnorm": check_batchnorm,
    "batchnorm_2d": check_batchnorm_dense,
    "maxpool2": check_maxpool2,
    "dense": check_dense,
    "relu": _check_activation("relu"),
    "elu": _check_activation("elu"),
    "gelu": _check_activation("gelu"),
    "softmax_xent": check_softmax_xent,
}


def run_gradcheck(instances: int = 20, seed: int = 0, include_network: bool = True) -> dict[str, float]:
    """Worst relative error per kernel over ``instances`` seeded random cases."""
    results = {}
    checks = dict(KERNELS)
    if include_network:
        checks["network"] = check_network
    for j, (name, check) in enumerate(checks.items()):
        rng = np.random.default_rng([seed, j])
        n = instances if name != "network" else max(1, instances // 10)
        results[name] = max(check(rng) for _ in range(n))
    return results
