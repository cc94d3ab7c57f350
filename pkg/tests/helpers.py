"""Oracles and model constructors shared by several test modules."""

import numpy as np

from pointmut.generators import FactorizedModel


def central_difference(fn, theta, h=1e-6):
    """Central finite-difference gradient of scalar ``fn`` at ``theta`` (modified in place, restored)."""
    grad = np.zeros_like(theta)
    flat, g = theta.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(theta)
        flat[i] = old - h
        down = fn(theta)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def self_sensitive_model(space, seed=0):
    """Site ``l``'s rates depend only on the symbol at site ``l``."""
    rng = np.random.default_rng(seed)
    L, A = space.length, space.alphabet.size
    per_symbol = rng.normal(size=(L, A, A, A))
    theta = np.stack([per_symbol[np.arange(L), x.symbols] for x in space])
    return FactorizedModel.tabular(space, theta)


def brute_force_jacobian(model, x):
    """Categorical Jacobian by explicit loops over mutants and pure-Python norms."""
    space = model.space
    L, A = space.length, space.alphabet.size
    out = np.zeros((L, L))
    base = model.evaluate_site_matrices(x)
    for i in range(L):
        for a in range(A):
            if a == x.symbols[i]:
                continue
            other = model.evaluate_site_matrices(x.mutate(i, a))
            for j in range(L):
                diff = base[j].rates - other[j].rates
                out[i, j] += np.sqrt(sum(float(v) ** 2 for v in diff.ravel()))
    return out / (A - 1)
