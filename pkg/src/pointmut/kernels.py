"""Transition kernels ``exp(tQ)`` and their derivatives.

Two matrix-exponential routes are provided. Uniformization is the default for
generators: it writes ``exp(tQ)`` as a Poisson mixture of powers of the
stochastic matrix ``R = I + Q / lam`` so every term is non-negative. Scaling
and squaring with a truncated Taylor series handles arbitrary square matrices,
in particular the block-triangular matrices behind Frechet derivatives.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

from .generators import (
    DENSE_LIMIT,
    FactorizedModel,
    FullGenerator,
    SiteRateMatrix,
    check_generator,
)
from .state_space import Sequence, StateSpace, StateSpaceTooLarge

NEGATIVE_CLAMP = 1e-12
STOCHASTIC_TOL = 1e-9
# above this Poisson mean, uniformization is applied to t / 2^k and squared back
_MAX_POISSON_MEAN = 64.0
_MIN_TERMS = 5
# uniformization work grows linearly with the Poisson mean; beyond this the rates are not sane
MAX_UNIFORMIZATION_MEAN = 1e7


class ExpmMethod(str, enum.Enum):
    UNIFORMIZATION = "uniformization"
    SCALING_SQUARING = "scaling_squaring"


@dataclass(frozen=True)
class ExpmConfig:
    method: ExpmMethod = ExpmMethod.UNIFORMIZATION
    truncation_tol: float = 1e-12
    taylor_order: int = 18
    max_squarings: int = 40

    def __post_init__(self):
        object.__setattr__(self, "method", ExpmMethod(self.method))
        if not 0 < self.truncation_tol <= 1e-6:
            raise ValueError(f"truncation_tol must lie in (0, 1e-6], got {self.truncation_tol}")
        if self.taylor_order < 4:
            raise ValueError(f"taylor_order must be >= 4, got {self.taylor_order}")
        if self.max_squarings < 0:
            raise ValueError("max_squarings must be non-negative")


DEFAULT_EXPM = ExpmConfig()


@dataclass(frozen=True)
class TransitionDistribution:
    space: StateSpace
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (self.space.num_states,):
            raise ValueError(f"expected {self.space.num_states} probabilities, got shape {p.shape}")
        p = _clamp(p)
        if abs(p.sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError(f"probabilities sum to {p.sum():.12f}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probabilities", p)

    def __getitem__(self, seq: Sequence) -> float:
        return float(self.probabilities[self.space.state_index(seq)])


def _clamp(p: np.ndarray) -> np.ndarray:
    worst = p.min() if p.size else 0.0
    if worst < -NEGATIVE_CLAMP:
        raise ValueError(f"kernel entry {worst:.3e} is negative beyond rounding; bad generator or tolerance")
    return np.where(p < 0, 0.0, p)


# -- Poisson weights -------------------------------------------------------------------


def poisson_terms(mean: float, tol: float) -> int:
    """Number of terms ``n = 0..N-1`` whose omitted Poisson tail mass is below ``tol``."""
    if not np.isfinite(mean) or mean > MAX_UNIFORMIZATION_MEAN:
        raise FloatingPointError(f"Poisson mean {mean:.3g} is too large for uniformization")
    if mean <= 0:
        return _MIN_TERMS
    # pdtrc(k, m) = P(X > k); search upward from a normal-approximation guess
    k = max(int(mean + 8.0 * np.sqrt(mean) + 8.0), _MIN_TERMS - 1)
    while special.pdtrc(k, mean) >= tol:
        k += max(1, int(np.sqrt(mean)))
    while k > _MIN_TERMS - 1 and special.pdtrc(k - 1, mean) < tol:
        k -= 1
    return k + 1


def uniformization_weights(lam: float, times, tol: float = 1e-12) -> np.ndarray:
    """Poisson(lam * t) probabilities, one row per time, evaluated in log space.

    The number of columns is chosen so the omitted tail is below ``tol`` for the
    largest time.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    means = lam * times
    n_terms = poisson_terms(float(means.max(initial=0.0)), tol)
    n = np.arange(n_terms)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = -means[:, None] + n[None, :] * np.log(means[:, None]) - special.gammaln(n + 1)[None, :]
    logw = np.where(means[:, None] > 0, logw, np.where(n[None, :] == 0, 0.0, -np.inf))
    return np.exp(logw)


# -- matrix exponentials -------------------------------------------------------------------


def _as_generator_array(Q) -> np.ndarray:
    if isinstance(Q, FullGenerator):
        return Q.dense()
    if isinstance(Q, SiteRateMatrix):
        return Q.rates
    return np.asarray(Q, dtype=float)


def expm_generator(Q, t: float, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """Row-stochastic ``exp(tQ)`` of a generator (or a stack of generators).

    Raises ``ValueError`` for negative ``t`` or a matrix that is not a generator.
    """
    if t < 0 or not np.isfinite(t):
        raise ValueError(f"branch length must be finite and non-negative, got {t}")
    q = _as_generator_array(Q)
    if q.ndim < 2 or q.shape[-1] != q.shape[-2]:
        raise ValueError(f"generator must be square, got shape {q.shape}")
    if q.shape[-1] > DENSE_LIMIT:
        raise StateSpaceTooLarge(f"dense exponential of a {q.shape[-1]}-state generator is not supported")
    check_generator(q)
    if t == 0:
        return np.broadcast_to(np.eye(q.shape[-1]), q.shape).copy()
    if cfg.method is ExpmMethod.UNIFORMIZATION:
        out = _expm_uniformization(q, t, cfg.truncation_tol)
    else:
        out = expm_taylor(t * q, cfg.taylor_order, cfg.max_squarings)
    out = _clamp(out)
    rowsum = out.sum(axis=-1)
    if np.max(np.abs(rowsum - 1.0)) > STOCHASTIC_TOL:
        raise ValueError("matrix exponential lost stochasticity; tighten the tolerance")
    return out


def _expm_uniformization(q: np.ndarray, t: float, tol: float) -> np.ndarray:
    n = q.shape[-1]
    eye = np.eye(n)
    lam = float(np.max(-np.diagonal(q, axis1=-2, axis2=-1), initial=0.0))
    if lam == 0.0:
        return np.broadcast_to(eye, q.shape).copy()
    halvings = 0
    while lam * t / 2**halvings > _MAX_POISSON_MEAN:
        halvings += 1
    step = t / 2**halvings
    r = eye + q / lam
    weights = uniformization_weights(lam, [step], tol / max(1, 2**halvings))[0]
    power = np.broadcast_to(eye, q.shape).copy()
    out = weights[0] * power
    for w in weights[1:]:
        power = power @ r
        out = out + w * power
    for _ in range(halvings):
        out = out @ out
    return out


def expm_taylor(A, order: int = 18, max_squarings: int = 40) -> np.ndarray:
    """Scaling and squaring with a truncated Taylor series; works for any square matrix."""
    a = np.asarray(A, dtype=float)
    norm = float(np.max(np.abs(a).sum(axis=-2), initial=0.0))  # induced 1-norm
    squarings = 0 if norm <= 1.0 else int(np.ceil(np.log2(norm)))
    if squarings > max_squarings:
        raise ValueError(f"matrix norm {norm:.3e} needs {squarings} squarings (limit {max_squarings})")
    a = a / 2.0**squarings
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    # Horner: I + a(I + a/2(I + a/3(...)))
    out = eye.copy()
    for k in range(order, 0, -1):
        out = eye + (a @ out) / k
    for _ in range(squarings):
        out = out @ out
    return out


def expm_row(Q: FullGenerator, x_index: int, t: float, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """Row ``x`` of ``exp(tQ)`` without forming the whole matrix when uniformizing."""
    if t < 0 or not np.isfinite(t):
        raise ValueError(f"branch length must be finite and non-negative, got {t}")
    q = _as_generator_array(Q)
    n = q.shape[0]
    if cfg.method is not ExpmMethod.UNIFORMIZATION:
        return expm_generator(q, t, cfg)[x_index]
    check_generator(q)
    v = np.zeros(n)
    v[x_index] = 1.0
    lam = float(np.max(-np.diag(q), initial=0.0))
    if t == 0 or lam == 0:
        return v
    if lam * t > 4 * _MAX_POISSON_MEAN:
        return expm_generator(q, t, cfg)[x_index]
    r = np.eye(n) + q / lam
    weights = uniformization_weights(lam, [t], cfg.truncation_tol)[0]
    out = weights[0] * v
    for w in weights[1:]:
        v = v @ r
        out += w * v
    return _clamp(out)


# -- transition distributions -----------------------------------------------------------------


def exact_transition(Q: FullGenerator, x: Sequence, t: float, cfg: ExpmConfig = DEFAULT_EXPM) -> TransitionDistribution:
    if x.space != Q.space:
        raise ValueError("start sequence belongs to a different state space")
    return TransitionDistribution(Q.space, expm_row(Q, x.index, t, cfg))


def site_kernels(model: FactorizedModel, x: Sequence, t: float, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """``exp(t Q(x)_l)`` for every site, shape ``(L, A, A)``."""
    if x.space != model.space:
        raise ValueError("sequence belongs to a different state space")
    return expm_generator(model.site_rates(x.index), t, cfg)


def factorized_transition(model: FactorizedModel, x: Sequence, y: Sequence, t: float,
                          cfg: ExpmConfig = DEFAULT_EXPM) -> float:
    """Product over sites of ``exp(t Q(x)_l)[x_l, y_l]``."""
    if y.space != model.space:
        raise ValueError("sequence belongs to a different state space")
    kernels = site_kernels(model, x, t, cfg)
    return float(np.prod([kernels[l, a, b] for l, (a, b) in enumerate(zip(x.symbols, y.symbols))]))


def factorized_distribution(model: FactorizedModel, x: Sequence, t: float,
                            cfg: ExpmConfig = DEFAULT_EXPM) -> TransitionDistribution:
    kernels = site_kernels(model, x, t, cfg)
    p = np.ones(1)
    for l, a in enumerate(x.symbols):
        p = np.kron(p, kernels[l, a])
    return TransitionDistribution(model.space, p)


# -- first-order approximation ---------------------------------------------------------------


def match_rows_to_truth(Q: FullGenerator, x: Sequence) -> list[SiteRateMatrix]:
    """Site matrices whose row ``x_l`` reproduces the single-mutation rates of ``Q`` out of ``x``.

    Row ``b != x_l`` of site ``l`` takes the rates of ``Q`` out of the context
    obtained from ``x`` by substituting ``b`` at site ``l``.
    """
    space = Q.space
    if x.space != space:
        raise ValueError("sequence belongs to a different state space")
    size = space.alphabet.size
    nb_rates = Q.neighbor_rates
    per_site = size - 1
    mats = []
    for site in range(space.length):
        rates = np.zeros((size, size))
        for b in range(size):
            z = x.mutate(site, b).index
            block = nb_rates[z, site * per_site:(site + 1) * per_site]
            targets = [c for c in range(size) if c != b]
            rates[b, targets] = block
        mats.append(SiteRateMatrix.from_offdiagonal(rates))
    return mats


def matched_context_rates(Q: FullGenerator) -> np.ndarray:
    """``match_rows_to_truth`` for every context at once, shape ``(S, L, A, A)``."""
    space = Q.space
    size, length = space.alphabet.size, space.length
    table = space.state_table
    powers = size ** np.arange(length - 1, -1, -1)
    nb_rates = Q.neighbor_rates.reshape(space.num_states, length, size - 1)
    out = np.zeros((space.num_states, length, size, size))
    for site in range(length):
        for b in range(size):
            z = np.arange(space.num_states) + (b - table[:, site]) * powers[site]
            targets = [c for c in range(size) if c != b]
            out[:, site, b, targets] = nb_rates[z, site]
    diag = np.arange(size)
    out[..., diag, diag] = -out.sum(axis=-1)
    return out


def matched_model(Q: FullGenerator) -> FactorizedModel:
    """Tabular factorized model whose site matrices at every context are ``match_rows_to_truth``."""
    return FactorizedModel.from_context_rates(Q.space, matched_context_rates(Q))


def prop1_error(Q: FullGenerator, model: FactorizedModel, x: Sequence, t: float,
                cfg: ExpmConfig = DEFAULT_EXPM) -> tuple[float, float]:
    """``(||P(.|x,t) - p(.|x,t)||_1, (lam t)^2)`` with ``lam`` the maximum exit rate of ``Q``."""
    exact = exact_transition(Q, x, t, cfg).probabilities
    approx = factorized_distribution(model, x, t, cfg).probabilities
    return float(np.abs(exact - approx).sum()), float((Q.max_exit_rate * t) ** 2)


# -- Frechet derivatives ------------------------------------------------------------------------


def frechet_derivative(A, E, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """Directional derivative ``L(A, E)`` of ``expm`` at ``A`` along ``E``.

    Read off the upper-right block of ``expm([[A, E], [0, A]])``.
    """
    a = np.asarray(A, dtype=float)
    e = np.asarray(E, dtype=float)
    if a.shape != e.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"A and E must be square and the same shape, got {a.shape} and {e.shape}")
    n = a.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = a
    block[:n, n:] = e
    block[n:, n:] = a
    return expm_taylor(block, cfg.taylor_order, cfg.max_squarings)[:n, n:]


def expm_entry_gradient(Q, t: float, x: int, y: int, cfg: ExpmConfig = DEFAULT_EXPM) -> np.ndarray:
    """Matrix ``G`` with ``G[u, v] = d exp(tQ)[x, y] / d Q[u, v]``."""
    q = _as_generator_array(Q)
    direction = np.zeros_like(q)
    direction[x, y] = 1.0
    return t * frechet_derivative(t * q.T, direction, cfg)
