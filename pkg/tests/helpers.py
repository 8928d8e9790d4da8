"""Shared oracles for the test suite.

The dense-matrix helpers materialize linear operators column by column so
that adjointness, symmetry, and operator norms can be checked against plain
linear algebra, independent of the implementation under test.
"""

import numpy as np

from iresnet_lab.network import new_model


def materialize(op, shape):
    """Dense matrix of a linear operator on (H, W) grids, column by column."""
    h, w = shape
    cols = []
    for i in range(h * w):
        e = np.zeros(h * w)
        e[i] = 1.0
        cols.append(op(e.reshape(h, w)).reshape(-1))
    return np.stack(cols, axis=1)


def materialize_multichannel(op, shape):
    """Dense matrix of a linear operator on (C, H, W) stacks."""
    c, h, w = shape
    n = c * h * w
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(op(e.reshape(c, h, w)).reshape(-1))
    return np.stack(cols, axis=1)


def flat_params(model):
    """Parameter arrays of a model, in checkpoint order."""
    out = []
    for sub in model.subnets:
        out += [sub.conv_a, sub.shrink_raw, sub.conv_b]
    return out


def flat_grads(grads):
    out = []
    for g in grads.subnets:
        out += [g.conv_a, g.shrink_raw, g.conv_b]
    return out


def fd_gradients(loss_fn, model, step=1e-5):
    """Central finite differences of a scalar loss over every parameter."""
    grads = []
    for p in flat_params(model):
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + step
            lp = loss_fn()
            p[idx] = old - step
            lm = loss_fn()
            p[idx] = old
            g[idx] = (lp - lm) / (2.0 * step)
        grads.append(g)
    return grads


def tiny_model(seed=11, lip=0.9, n=2, channels=2, hidden=4, size=6):
    """Small differencing-friendly model (~420 parameters on defaults)."""
    model = new_model(n, channels, hidden, size, size, lip, seed=seed)
    # keep soft-shrink thresholds comfortably away from the activations' kinks
    rng = np.random.default_rng(seed + 1)
    for s in model.subnets:
        s.shrink_raw = 0.05 * rng.standard_normal(s.shrink_raw.shape)
    return model
