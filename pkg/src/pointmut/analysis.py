"""Metrics for comparing kernels and probing fitted models."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .estimation import assemble_full_from_factorized
from .generators import FactorizedModel, FullGenerator
from .kernels import (
    DEFAULT_EXPM,
    ExpmConfig,
    TransitionDistribution,
    exact_transition,
    expm_generator,
    factorized_transition,
    site_kernels,
)
from .state_space import Sequence

log = logging.getLogger(__name__)


def _probs(d) -> np.ndarray:
    return d.probabilities if isinstance(d, TransitionDistribution) else np.asarray(d, dtype=float)


def support_violations(p, q) -> int:
    """Number of states where ``p > 0`` but ``q == 0``."""
    return int(np.count_nonzero((_probs(p) > 0) & (_probs(q) <= 0)))


def kl_divergence(p, q) -> float:
    """``sum p log(p / q)`` in nats, with ``0 log 0 = 0``.

    Returns ``inf`` (and logs the offending count) when ``q`` misses support of ``p``.
    """
    if isinstance(p, TransitionDistribution) and isinstance(q, TransitionDistribution) and p.space != q.space:
        raise ValueError("distributions live on different state spaces")
    pp, qq = _probs(p), _probs(q)
    if pp.shape != qq.shape:
        raise ValueError(f"distribution shapes differ: {pp.shape} vs {qq.shape}")
    bad = support_violations(pp, qq)
    if bad:
        log.warning("KL divergence is infinite: q has zero mass on %d states in the support of p", bad)
        return float("inf")
    nz = pp > 0
    return max(float(np.sum(pp[nz] * (np.log(pp[nz]) - np.log(qq[nz])))), 0.0)


def _row_kl(P: np.ndarray, Qm: np.ndarray) -> np.ndarray:
    out = np.empty(len(P))
    for i in range(len(P)):
        out[i] = kl_divergence(P[i], Qm[i])
    return out


def frobenius_relative_error(Q_est: FullGenerator, Q_true: FullGenerator) -> float:
    """``||Q_est - Q_true||_F / ||Q_true||_F``."""
    if Q_est.space != Q_true.space:
        raise ValueError("generators live on different state spaces")
    a, b = Q_est.dense(), Q_true.dense()
    denom = np.linalg.norm(b)
    if denom == 0:
        raise ValueError("reference generator has zero Frobenius norm")
    return float(np.linalg.norm(a - b) / denom)


def default_t_grid() -> np.ndarray:
    """30 log-spaced branch lengths from 0.01 to 10."""
    grid = np.logspace(-2.0, 1.0, 30)
    grid[0], grid[-1] = 0.01, 10.0
    return grid


@dataclass(frozen=True)
class SamplingCurves:
    t: np.ndarray
    kl_gillespie: np.ndarray
    kl_matexp: np.ndarray

    def rows(self) -> list[tuple[float, float, float]]:
        return list(zip(self.t.tolist(), self.kl_gillespie.tolist(), self.kl_matexp.tolist()))


def factorized_kernel_matrix(model: FactorizedModel, t: float, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """Row ``x`` is the per-site product kernel ``p(.|x, t)`` of the model."""
    space = model.space
    out = np.empty((space.num_states, space.num_states))
    for x in space:
        kernels = site_kernels(model, x, t, cfg)
        row = np.ones(1)
        for l, a in enumerate(x.symbols):
            row = np.kron(row, kernels[l, a])
        out[x.index] = row
    return out


def sampling_error_curves(Q_true: FullGenerator, fitted: FactorizedModel, t_grid=None,
                          cfg: ExpmConfig = DEFAULT_EXPM) -> SamplingCurves:
    """Mean KL from the true kernel to the Gillespie and per-site-exponential kernels of ``fitted``.

    Both sides are exact: the Gillespie kernel is ``exp(t Q_hat)`` with ``Q_hat``
    assembled by querying the model at every state.
    """
    if fitted.space != Q_true.space:
        raise ValueError("model and truth live on different state spaces")
    grid = default_t_grid() if t_grid is None else np.asarray(t_grid, dtype=float)
    q_hat = assemble_full_from_factorized(fitted)
    kl_g, kl_m = np.empty(len(grid)), np.empty(len(grid))
    for i, t in enumerate(grid):
        truth = expm_generator(Q_true, float(t), cfg)
        kl_g[i] = _row_kl(truth, expm_generator(q_hat, float(t), cfg)).mean()
        kl_m[i] = _row_kl(truth, factorized_kernel_matrix(fitted, float(t), cfg)).mean()
    return SamplingCurves(grid, kl_g, kl_m)


@dataclass(frozen=True)
class JacobianResult:
    sensitivity: np.ndarray
    context: Sequence


def categorical_jacobian(model: FactorizedModel, x: Sequence) -> JacobianResult:
    """``S[i, j]``: mean Frobenius shift of site ``j``'s rate matrix over all substitutions at site ``i``."""
    space = model.space
    if x.space != space:
        raise ValueError("sequence belongs to a different state space")
    L, A = space.length, space.alphabet.size
    wild = model.site_rates(x.index)
    sens = np.zeros((L, L))
    for i in range(L):
        for a in range(A):
            if a == x.symbols[i]:
                continue
            mutant = model.site_rates(x.mutate(i, a).index)
            sens[i] += np.linalg.norm(wild - mutant, axis=(1, 2))
        sens[i] /= A - 1
    return JacobianResult(sens, x)


def _log_kernel(model, x: Sequence, y: Sequence, t: float, cfg: ExpmConfig) -> float:
    if isinstance(model, FullGenerator):
        p = exact_transition(model, x, t, cfg).probabilities[y.index]
    else:
        p = factorized_transition(model, x, y, t, cfg)
    return float(np.log(p)) if p > 0 else -np.inf


def selection_score(model, baseline, x: Sequence, y: Sequence, t: float,
                    cfg: ExpmConfig = DEFAULT_EXPM) -> float:
    """``log p(y|x,t) - log q(y|x,t)`` with ``q`` the selection-free baseline.

    Either argument may be a full generator (exact kernel) or a factorized model
    (per-site product kernel). A zero baseline probability yields ``+inf`` and a warning.
    """
    if not t > 0:
        raise ValueError("selection scores need t > 0")
    if model.space != baseline.space:
        raise ValueError("model and baseline must share a state space")
    lq = _log_kernel(baseline, x, y, t, cfg)
    lp = _log_kernel(model, x, y, t, cfg)
    if lq == -np.inf:
        log.warning("baseline assigns zero probability to %s -> %s; score is +inf", x, y)
        return float("inf")
    return lp - lq


def per_site_entropy(model: FactorizedModel, x: Sequence, t: float, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """Shannon entropy (nats) of each site's row ``exp(t Q(x)_l)[x_l, :]``."""
    kernels = site_kernels(model, x, t, cfg)
    rows = kernels[np.arange(model.space.length), list(x.symbols)]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rows > 0, -rows * np.log(rows), 0.0)
    return np.clip(terms.sum(axis=1), 0.0, np.log(model.space.alphabet.size))
