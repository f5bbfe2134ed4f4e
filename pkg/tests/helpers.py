"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from korea_sfl.engine import NetworkSpec, init_params, split_full


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def fd_gradient(fn, w, h=1e-5):
    """Central differences of scalar ``fn`` at ``w``."""
    w = np.array(w, dtype=np.float64)
    out = np.empty_like(w)
    for k in range(w.size):
        old = w[k]
        w[k] = old + h
        up = fn(w)
        w[k] = old - h
        down = fn(w)
        w[k] = old
        out[k] = (up - down) / (2 * h)
    return out


def random_instance(gen, max_layers=4, max_width=6, max_batch=7, kink_margin=1e-3):
    """Random small network, model and labelled batch, away from ReLU kinks.

    Parameters get a random jitter so no bias is exactly zero (zero biases
    behind a dead ReLU row land exactly on the kink), and draws with any
    hidden pre-activation within ``kink_margin`` of zero are redrawn, since
    central differences straddling a kink do not estimate the gradient.
    """
    while True:
        layers = int(gen.integers(2, max_layers + 1))
        dims = [int(d) for d in gen.integers(2, max_width + 1, layers + 1)]
        spec = NetworkSpec.mlp(dims, split_at=int(gen.integers(1, layers)))
        full = init_params(spec, int(gen.integers(0, 2**31))).full()
        model = split_full(spec, full + 0.1 * gen.standard_normal(full.size))
        batch = int(gen.integers(1, max_batch + 1))
        x = gen.standard_normal((batch, dims[0]))
        y = gen.integers(0, dims[-1], batch)
        h, pos = x, 0
        closest = np.inf
        values = model.full()
        for k, layer in enumerate(spec.layers):
            w = values[pos:pos + layer.in_dim * layer.out_dim].reshape(layer.in_dim, layer.out_dim)
            pos += layer.in_dim * layer.out_dim
            z = h @ w + values[pos:pos + layer.out_dim]
            pos += layer.out_dim
            if layer.activation == "relu":
                closest = min(closest, float(np.abs(z).min()))
                h = np.maximum(z, 0)
        if closest > kink_margin:
            return spec, model, x, y
