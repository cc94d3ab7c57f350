"""Rate matrices for sequential point-mutation processes.

Holds the full ``|A|^L x |A|^L`` generator, per-site ``|A| x |A|`` generators,
context-conditional factorized models, the synthetic codon ground truths and
the mutation-selection (Halpern-Bruno) construction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence as SequenceLike

import numpy as np
import scipy.sparse as sp

from .rng import make_rng
from .state_space import Sequence, StateSpace, StateSpaceTooLarge

ROW_SUM_TOL = 1e-10
SITE_ROW_SUM_TOL = 1e-12
DENSE_LIMIT = 4096
RATE_FLOOR = 1e-12


def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    """Derivative of softplus, i.e. the logistic function."""
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("inverse softplus needs strictly positive rates")
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y + np.log1p(-np.exp(-y)), np.log(np.expm1(np.minimum(y, 30.0))))


def _fill_diagonal(rates: np.ndarray) -> np.ndarray:
    """Set the diagonal of a (batch of) square matrices to minus the off-diagonal row sum."""
    out = np.array(rates, dtype=float, copy=True)
    n = out.shape[-1]
    diag = np.arange(n)
    out[..., diag, diag] = 0.0
    out[..., diag, diag] = -out.sum(axis=-1)
    return out


class SiteRateMatrix:
    """A single ``|A| x |A|`` generator for one site."""

    __slots__ = ("rates",)

    def __init__(self, rates, *, validate: bool = True):
        rates = np.array(rates, dtype=float)
        if rates.ndim != 2 or rates.shape[0] != rates.shape[1]:
            raise ValueError(f"site rate matrix must be square, got shape {rates.shape}")
        if validate:
            check_generator(rates, tol=SITE_ROW_SUM_TOL)
        rates.setflags(write=False)
        self.rates = rates

    @classmethod
    def from_offdiagonal(cls, offdiag) -> "SiteRateMatrix":
        return cls(_fill_diagonal(offdiag))

    @property
    def size(self) -> int:
        return self.rates.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.rates if dtype is None else self.rates.astype(dtype)

    def __eq__(self, other):
        return isinstance(other, SiteRateMatrix) and np.array_equal(self.rates, other.rates)

    def __repr__(self) -> str:
        return f"SiteRateMatrix({self.rates.tolist()})"


def check_generator(rates, tol: float = ROW_SUM_TOL) -> None:
    """Raise ``ValueError`` unless ``rates`` has non-negative off-diagonals and zero row sums."""
    if sp.issparse(rates):
        coo = rates.tocoo()
        off = coo.row != coo.col
        if np.any(coo.data[off] < 0):
            raise ValueError("generator has negative off-diagonal rates")
        rowsum = np.asarray(rates.sum(axis=1)).ravel()
        if not np.all(np.isfinite(coo.data)):
            raise ValueError("generator has non-finite rates")
    else:
        rates = np.asarray(rates, dtype=float)
        if not np.all(np.isfinite(rates)):
            raise ValueError("generator has non-finite rates")
        off = ~np.eye(rates.shape[-1], dtype=bool)
        if np.any(rates[..., off] < 0):
            raise ValueError("generator has negative off-diagonal rates")
        rowsum = rates.sum(axis=-1)
    worst = float(np.max(np.abs(rowsum))) if np.size(rowsum) else 0.0
    if worst > tol:
        raise ValueError(f"generator rows must sum to zero; worst |row sum| = {worst:.3e}")


class FullGenerator:
    """Rate matrix over the whole sequence space.

    Off-diagonal entries are non-zero only between Hamming neighbours. Rates
    are stored densely up to 4096 states and as CSR above that.
    """

    def __init__(self, space: StateSpace, rates, *, validate: bool = True):
        n = space.num_states
        if sp.issparse(rates):
            rates = sp.csr_matrix(rates, dtype=float)
            if n <= DENSE_LIMIT:
                rates = rates.toarray()
        else:
            rates = np.array(rates, dtype=float)
            if n > DENSE_LIMIT:
                rates = sp.csr_matrix(rates)
        if rates.shape != (n, n):
            raise ValueError(f"rates shape {rates.shape} does not match {n} states")
        if validate:
            check_generator(rates)
            _check_point_mutation_sparsity(space, rates)
        if not sp.issparse(rates):
            rates.setflags(write=False)
        self.space = space
        self.rates = rates

    @classmethod
    def from_neighbor_rates(cls, space: StateSpace, neighbor_rates: np.ndarray) -> "FullGenerator":
        """Build from a ``(num_states, L*(A-1))`` table in :attr:`StateSpace.neighbor_table` order."""
        neighbors, _, _ = space.neighbor_table
        n = space.num_states
        neighbor_rates = np.asarray(neighbor_rates, dtype=float)
        if neighbor_rates.shape != neighbors.shape:
            raise ValueError(f"expected neighbour rates of shape {neighbors.shape}")
        exit_rates = neighbor_rates.sum(axis=1)
        if n <= DENSE_LIMIT:
            q = np.zeros((n, n))
            rows = np.repeat(np.arange(n), neighbors.shape[1])
            q[rows, neighbors.ravel()] = neighbor_rates.ravel()
            q[np.arange(n), np.arange(n)] = -exit_rates
            return cls(space, q)
        rows = np.concatenate([np.repeat(np.arange(n), neighbors.shape[1]), np.arange(n)])
        cols = np.concatenate([neighbors.ravel(), np.arange(n)])
        vals = np.concatenate([neighbor_rates.ravel(), -exit_rates])
        return cls(space, sp.csr_matrix((vals, (rows, cols)), shape=(n, n)))

    @property
    def is_dense(self) -> bool:
        return not sp.issparse(self.rates)

    def dense(self) -> np.ndarray:
        if self.is_dense:
            return self.rates
        if self.space.num_states > DENSE_LIMIT:
            raise StateSpaceTooLarge(
                f"dense rate matrix requested for {self.space.num_states} states "
                f"(limit {DENSE_LIMIT})"
            )
        return self.rates.toarray()

    @cached_property
    def neighbor_rates(self) -> np.ndarray:
        """Off-diagonal rates in neighbour-table order, ``(num_states, L*(A-1))``."""
        neighbors, _, _ = self.space.neighbor_table
        rows = np.arange(self.space.num_states)[:, None]
        if self.is_dense:
            return np.asarray(self.rates[rows, neighbors])
        return np.asarray(self.rates[rows, neighbors]).reshape(neighbors.shape)

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.asarray(self.rates.diagonal()).ravel()

    @property
    def max_exit_rate(self) -> float:
        return float(self.exit_rates.max())

    def __eq__(self, other):
        if not isinstance(other, FullGenerator) or other.space != self.space:
            return NotImplemented
        a, b = self.rates, other.rates
        if sp.issparse(a) or sp.issparse(b):
            return (sp.csr_matrix(a) != sp.csr_matrix(b)).nnz == 0
        return np.array_equal(a, b)

    def __repr__(self) -> str:
        return f"FullGenerator(states={self.space.num_states}, max_exit={self.max_exit_rate:.4g})"


def _check_point_mutation_sparsity(space: StateSpace, rates) -> None:
    if sp.issparse(rates):
        coo = rates.tocoo()
        rows, cols = coo.row[coo.data != 0], coo.col[coo.data != 0]
    else:
        rows, cols = np.nonzero(rates)
    off = rows != cols
    rows, cols = rows[off], cols[off]
    table = space.state_table
    dist = (table[rows] != table[cols]).sum(axis=1)
    if np.any(dist != 1):
        bad = int(np.argmax(dist != 1))
        raise ValueError(
            f"rate between states {rows[bad]} and {cols[bad]} (Hamming distance {dist[bad]}) "
            "violates point-mutation sparsity"
        )


class Parameterization(str, enum.Enum):
    CONTEXT_FREE = "factorized_context_free"
    CONTEXT_TABULAR = "factorized_tabular"


class FactorizedModel:
    """Per-site generators ``Q(x)_l``, optionally conditioned on the whole sequence ``x``.

    ``CONTEXT_FREE`` models store one rate matrix per site. ``CONTEXT_TABULAR``
    models store a free parameter for every context state, site and ordered pair
    ``a != b``; rates are ``softplus(theta)`` floored at ``RATE_FLOOR``.
    """

    def __init__(self, space: StateSpace, parameterization: Parameterization, params):
        parameterization = Parameterization(parameterization)
        params = np.array(params, dtype=float)
        size, length = space.alphabet.size, space.length
        if parameterization is Parameterization.CONTEXT_FREE:
            expected = (length, size, size)
            if params.shape != expected:
                raise ValueError(f"context-free rates must have shape {expected}, got {params.shape}")
            params = _fill_diagonal(params)
            check_generator(params, tol=SITE_ROW_SUM_TOL)
        else:
            expected = (space.num_states, length, size, size)
            if params.shape != expected:
                raise ValueError(f"tabular parameters must have shape {expected}, got {params.shape}")
            if not np.all(np.isfinite(params)):
                raise ValueError("tabular parameters must be finite")
            diag = np.arange(size)
            params[..., diag, diag] = 0.0
        params.setflags(write=False)
        self.space = space
        self.parameterization = parameterization
        self.params = params

    @classmethod
    def context_free(cls, space: StateSpace, site_matrices) -> "FactorizedModel":
        mats = np.stack([np.asarray(m, dtype=float) for m in site_matrices])
        return cls(space, Parameterization.CONTEXT_FREE, mats)

    @classmethod
    def tabular(cls, space: StateSpace, theta) -> "FactorizedModel":
        return cls(space, Parameterization.CONTEXT_TABULAR, theta)

    @classmethod
    def from_context_rates(cls, space: StateSpace, rates) -> "FactorizedModel":
        """Tabular model reproducing given ``(num_states, L, A, A)`` off-diagonal rates."""
        rates = np.array(rates, dtype=float)
        size = space.alphabet.size
        off = ~np.eye(size, dtype=bool)
        theta = np.zeros_like(rates)
        theta[..., off] = inverse_softplus(np.maximum(rates[..., off], RATE_FLOOR))
        return cls.tabular(space, theta)

    @property
    def is_context_free(self) -> bool:
        return self.parameterization is Parameterization.CONTEXT_FREE

    def site_rates(self, context_index: int) -> np.ndarray:
        """Site generators at context state ``context_index`` as an ``(L, A, A)`` array."""
        if self.is_context_free:
            return self.params
        if "all_site_rates" in self.__dict__:
            return self.all_site_rates[context_index]
        return tabular_rates(self.params[context_index])

    @cached_property
    def all_site_rates(self) -> np.ndarray:
        """``(num_states, L, A, A)`` site generators for every context."""
        if self.is_context_free:
            return np.broadcast_to(self.params, (self.space.num_states, *self.params.shape))
        out = tabular_rates(self.params)
        out.setflags(write=False)
        return out

    def evaluate_site_matrices(self, context: Sequence) -> list[SiteRateMatrix]:
        if context.space != self.space:
            raise ValueError("context belongs to a different state space")
        rates = self.site_rates(self.space.state_index(context))
        return [SiteRateMatrix(r, validate=False) for r in rates]

    @cached_property
    def jump_rates(self) -> np.ndarray:
        """Rates of every single-site move out of every state, ``(num_states, L*(A-1))``."""
        _, sites, syms = self.space.neighbor_table
        table = self.space.state_table
        states = np.arange(self.space.num_states)[:, None]
        current = np.take_along_axis(table, sites, axis=1)
        rates = self.all_site_rates[states, sites, current, syms]
        rates = np.ascontiguousarray(rates)
        rates.setflags(write=False)
        return rates

    def __repr__(self) -> str:
        return f"FactorizedModel({self.parameterization.name}, L={self.space.length}, A={self.space.alphabet.size})"


def tabular_rates(theta: np.ndarray) -> np.ndarray:
    """Softplus-link site generators from raw tabular parameters."""
    size = theta.shape[-1]
    off = ~np.eye(size, dtype=bool)
    rates = np.where(off, np.maximum(softplus(theta), RATE_FLOOR), 0.0)
    return _fill_diagonal(rates)


def evaluate_site_matrices(model: FactorizedModel, context: Sequence) -> list[SiteRateMatrix]:
    return model.evaluate_site_matrices(context)


# -- synthetic ground truths --------------------------------------------------------


def draw_site_matrices(space: StateSpace, rng_seed) -> list[SiteRateMatrix]:
    """One generator per site with i.i.d. Uniform[0, 2) off-diagonal rates."""
    rng = make_rng(rng_seed)
    size = space.alphabet.size
    off = ~np.eye(size, dtype=bool)
    mats = []
    for _ in range(space.length):
        draws = rng.uniform(0.0, 2.0, size=(size, size))
        mats.append(SiteRateMatrix.from_offdiagonal(np.where(off, draws, 0.0)))
    return mats


def build_factorized_truth(space: StateSpace, rng_seed) -> FullGenerator:
    """Site-independent ground truth: per-site Uniform[0, 2) generators embedded in the full space."""
    return kronecker_sum(draw_site_matrices(space, rng_seed), space)


def build_state_dependent_truth(space: StateSpace, rng_seed) -> FullGenerator:
    """Maximally epistatic ground truth: every Hamming-1 move gets its own Uniform[0, 2) rate."""
    rng = make_rng(rng_seed)
    draws = rng.uniform(0.0, 2.0, size=(space.num_states, space.num_neighbors))
    return FullGenerator.from_neighbor_rates(space, draws)


def interpolate_truth(q_fact: FullGenerator, q_dep: FullGenerator, epsilon: float) -> FullGenerator:
    """``(1 - epsilon) * q_fact + epsilon * q_dep``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if q_fact.space != q_dep.space:
        raise ValueError("generators live on different state spaces")
    if epsilon == 0.0:
        return q_fact
    if epsilon == 1.0:
        return q_dep
    return FullGenerator(q_fact.space, (1.0 - epsilon) * q_fact.rates + epsilon * q_dep.rates)


def kronecker_sum(site_matrices: SequenceLike, space: StateSpace | None = None) -> FullGenerator:
    """``Q_1 (+) Q_2 (+) ... (+) Q_L`` as a full generator."""
    mats = np.stack([np.asarray(m, dtype=float) for m in site_matrices])
    length, size, _ = mats.shape
    if space is None:
        from .state_space import Alphabet

        space = StateSpace(Alphabet(tuple(chr(ord("a") + i) for i in range(size))), length)
    if space.length != length or space.alphabet.size != size:
        raise ValueError("site matrices do not match the state space")
    _, sites, syms = space.neighbor_table
    current = np.take_along_axis(space.state_table, sites, axis=1)
    return FullGenerator.from_neighbor_rates(space, mats[sites, current, syms])


# -- mutation-selection ------------------------------------------------------------


@dataclass(frozen=True)
class FixationParams:
    effective_population: float
    rate_scale: float | None = None

    def __post_init__(self):
        if not self.effective_population > 0:
            raise ValueError("effective population size must be positive")
        if self.rate_scale is None:
            # neutral case then reduces to Q = mu
            object.__setattr__(self, "rate_scale", float(self.effective_population))
        if not self.rate_scale > 0:
            raise ValueError("rate scale k must be positive")


_TAYLOR_CUTOFF = 1e-8


def fixation_probability(s, params: FixationParams):
    """Kimura fixation probability of a new haploid allele with selective advantage ``s``.

    ``(1 - exp(-2 s)) / (1 - exp(-2 N_e s))``, evaluated without overflow for
    strongly deleterious alleles and by a second-order series near ``s = 0``.
    """
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("selection coefficients must be finite")
    n = float(params.effective_population)
    out = np.empty_like(s)
    small = np.abs(s) < _TAYLOR_CUTOFF
    pos = (s > 0) & ~small
    neg = (s < 0) & ~small
    ss = s[small]
    out[small] = (1.0 + (n - 1.0) * ss + (n - 1.0) * (n - 2.0) * ss**2 / 3.0) / n
    sp_ = s[pos]
    out[pos] = np.expm1(-2.0 * sp_) / np.expm1(-2.0 * n * sp_)
    sn = s[neg]
    # multiply through by exp(2 N s) so nothing overflows
    out[neg] = np.exp(2.0 * (n - 1.0) * sn) * np.expm1(2.0 * sn) / np.expm1(2.0 * n * sn)
    return out if out.ndim else float(out)


def halpern_bruno_generator(baseline: FullGenerator, fitness, params: FixationParams) -> FullGenerator:
    """Observed rates ``k * mu_xy * P_fix(F_y - F_x)`` from a mutation baseline ``mu``."""
    space = baseline.space
    fitness = np.asarray(fitness, dtype=float)
    if fitness.shape != (space.num_states,):
        raise ValueError(f"fitness must have one value per state ({space.num_states}), got {fitness.shape}")
    if not np.all(np.isfinite(fitness)):
        raise ValueError("fitness values must be finite")
    neighbors, _, _ = space.neighbor_table
    s = fitness[neighbors] - fitness[:, None]
    rates = params.rate_scale * baseline.neighbor_rates * fixation_probability(s, params)
    return FullGenerator.from_neighbor_rates(space, rates)
