"""Gillespie simulation of point-mutation chains, with optional classifier guidance.

Guidance tilts every single-site rate ``Q[x, y]`` by ``(2 Phi(delta / sigma))^gamma``
where ``delta`` estimates how much the oracle mean improves from ``x`` to ``y``.
``EXACT`` mode evaluates the oracle on every neighbour; ``TAG`` mode linearises
the mean with one gradient call per step.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from .generators import FactorizedModel, FullGenerator
from .kernels import DEFAULT_EXPM, ExpmConfig, TransitionDistribution, expm_generator, expm_row
from .state_space import Sequence, StateSpace
from .trees import TreeNode

SIGMA_FLOOR = 1e-6
MAX_JUMPS = 10**6
_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class FitnessOracle:
    """Predicted affinity ``mean(x)``, its uncertainty ``stddev(x)`` and ``d mean / d onehot(x)``."""

    mean: Callable[[Sequence], float]
    stddev: Callable[[Sequence], float]
    gradient: Callable[[Sequence], np.ndarray]
    name: str = "custom"

    def sigma(self, x: Sequence) -> float:
        return max(float(self.stddev(x)), SIGMA_FLOOR)


def linear_oracle(weights, sigma: float = 1.0) -> FitnessOracle:
    """``mean(x) = sum_l w[l, x_l]``; the gradient is ``w`` everywhere."""
    w = np.array(weights, dtype=float)
    w.setflags(write=False)

    def mean(x: Sequence) -> float:
        return float(sum(w[l, a] for l, a in enumerate(x.symbols)))

    return FitnessOracle(mean, lambda x: sigma, lambda x: w, name="linear")


def tabular_oracle(values, sigma: float = 1.0) -> FitnessOracle:
    """Explicit value per state; the gradient is the one-hot difference table.

    ``g[l, a] = mean(x with x_l = a) - mean(x)``, so linearised guidance is exact
    for single-site moves.
    """
    v = np.array(values, dtype=float)

    def mean(x: Sequence) -> float:
        return float(v[x.index])

    def gradient(x: Sequence) -> np.ndarray:
        space = x.space
        size = space.alphabet.size
        powers = size ** np.arange(space.length - 1, -1, -1)
        idx = x.index
        cur = np.asarray(x.symbols)
        nb = idx + (np.arange(size)[None, :] - cur[:, None]) * powers[:, None]
        return v[nb] - v[idx]

    return FitnessOracle(mean, lambda x: sigma, gradient, name="tabular")


class GuidanceMode(str, enum.Enum):
    EXACT = "exact"
    TAG = "tag"


@dataclass(frozen=True)
class GuidanceConfig:
    gamma: float = 0.0
    mode: GuidanceMode = GuidanceMode.TAG
    # EXACT mode only: evaluate sigma at the parent (default) or at each child
    sigma_at: str = "parent"

    def __post_init__(self):
        object.__setattr__(self, "mode", GuidanceMode(self.mode))
        if not self.gamma >= 0:
            raise ValueError(f"guidance strength must be non-negative, got {self.gamma}")
        if self.sigma_at not in ("parent", "child"):
            raise ValueError("sigma_at must be 'parent' or 'child'")


@dataclass
class Trajectory:
    start: Sequence
    branch_length: float
    jumps: list[tuple[float, int, int, int]] = field(default_factory=list)  # (time, site, from, to)

    @property
    def states(self) -> list[tuple[float, Sequence]]:
        out = [(0.0, self.start)]
        seq = self.start
        for time, site, _, to in self.jumps:
            seq = seq.mutate(site, to)
            out.append((time, seq))
        return out

    @property
    def end(self) -> Sequence:
        return self.states[-1][1]


# -- jump rates --------------------------------------------------------------------


def _candidates(space: StateSpace, symbols) -> tuple[np.ndarray, np.ndarray]:
    size = space.alphabet.size
    sites = np.repeat(np.arange(space.length), size - 1)
    k = np.tile(np.arange(size - 1), space.length)
    cur = np.asarray(symbols)[sites]
    return sites, np.where(k < cur, k, k + 1)


def base_jump_rates(model, x: Sequence) -> np.ndarray:
    """Single-site move rates out of ``x`` in neighbour order (site-major, then symbol)."""
    if isinstance(model, FullGenerator):
        return np.array(model.neighbor_rates[x.index])
    rates = model.site_rates(x.index)
    sites, syms = _candidates(model.space, x.symbols)
    cur = np.asarray(x.symbols)[sites]
    return rates[sites, cur, syms]


def tilt_log_factors(oracle: FitnessOracle, cfg: GuidanceConfig, x: Sequence) -> np.ndarray:
    """``log[(2 Phi(delta / sigma))^gamma]`` for every neighbour of ``x``."""
    space = x.space
    sites, syms = _candidates(space, x.symbols)
    if cfg.mode is GuidanceMode.TAG:
        g = np.asarray(oracle.gradient(x), dtype=float)
        if g.shape != (space.length, space.alphabet.size):
            raise ValueError(f"oracle {oracle.name} returned a gradient of shape {g.shape}")
        cur = np.asarray(x.symbols)[sites]
        delta = g[sites, syms] - g[sites, cur]
        sigma = oracle.sigma(x)
    else:
        mu_x = float(oracle.mean(x))
        children = [x.mutate(int(l), int(a)) for l, a in zip(sites, syms)]
        delta = np.array([float(oracle.mean(y)) for y in children]) - mu_x
        if cfg.sigma_at == "parent":
            sigma = oracle.sigma(x)
        else:
            sigma = np.array([oracle.sigma(y) for y in children])
    if not np.all(np.isfinite(delta)):
        raise ValueError(f"oracle {oracle.name} produced non-finite predictions at {x}")
    return cfg.gamma * (_LOG2 + special.log_ndtr(delta / sigma))


def tilted_jump_rates(model, oracle: FitnessOracle | None, cfg: GuidanceConfig | None, x: Sequence) -> np.ndarray:
    rates = base_jump_rates(model, x)
    if oracle is None or cfg is None or cfg.gamma == 0:
        return rates
    return rates * np.exp(tilt_log_factors(oracle, cfg, x))


class _RateTable:
    """Cumulative jump rates per visited state; safe to reuse across trajectories."""

    def __init__(self, model, oracle=None, cfg=None):
        self.model = model
        self.space = model.space
        self.oracle = oracle
        self.cfg = cfg
        self._cache: dict[int, np.ndarray] = {}

    def cumulative(self, index: int, symbols) -> np.ndarray:
        cum = self._cache.get(index)
        if cum is None:
            x = Sequence(self.space, tuple(symbols))
            rates = tilted_jump_rates(self.model, self.oracle, self.cfg, x)
            if not np.all(np.isfinite(rates)) or np.any(rates < 0):
                raise ValueError(f"invalid jump rates at {x}: {rates}")
            cum = np.cumsum(rates)
            self._cache[index] = cum
        return cum


def _run(table: _RateTable, x0: Sequence, t: float, rng: np.random.Generator,
         max_jumps: int, record: bool):
    if t < 0 or not np.isfinite(t):
        raise ValueError(f"branch length must be finite and non-negative, got {t}")
    space = table.space
    size = space.alphabet.size
    per_site = size - 1
    powers = [size ** (space.length - 1 - l) for l in range(space.length)]
    symbols = list(x0.symbols)
    index = x0.index
    jumps = [] if record else None
    now = 0.0
    n_jumps = 0
    while now < t:
        cum = table.cumulative(index, symbols)
        total = cum[-1]
        if total <= 0.0:
            break  # absorbing: the holding time is infinite
        tau = rng.standard_exponential() / total
        if now + tau > t:
            break
        u = rng.random() * total
        j = int(np.searchsorted(cum, u, side="right"))
        site, k = divmod(j, per_site)
        old = symbols[site]
        new = k if k < old else k + 1
        symbols[site] = new
        index += (new - old) * powers[site]
        now += tau
        n_jumps += 1
        if record:
            jumps.append((now, site, old, new))
        if n_jumps > max_jumps:
            raise RuntimeError(
                f"exceeded {max_jumps} jumps along one branch; last state "
                f"{space.format(Sequence(space, tuple(symbols)))} has exit rate {total:.4g}"
            )
    return index, symbols, jumps


def gillespie(model, x0: Sequence, t: float, rng: np.random.Generator,
              max_jumps: int = MAX_JUMPS) -> tuple[Sequence, Trajectory]:
    """Exact simulation of the chain whose instantaneous rates out of ``x`` are ``Q(x)``."""
    return guided_gillespie(model, None, None, x0, t, rng, max_jumps=max_jumps)


def guided_gillespie(model, oracle: FitnessOracle | None, cfg: GuidanceConfig | None,
                     x0: Sequence, t: float, rng: np.random.Generator,
                     max_jumps: int = MAX_JUMPS, _table: _RateTable | None = None) -> tuple[Sequence, Trajectory]:
    if x0.space != model.space:
        raise ValueError("start sequence belongs to a different state space")
    table = _table or _RateTable(model, oracle, cfg)
    _, symbols, jumps = _run(table, x0, t, rng, max_jumps, record=True)
    return Sequence(model.space, tuple(symbols)), Trajectory(x0, float(t), jumps)


def sample_endpoints(model, x0: Sequence, t: float, n: int, rng: np.random.Generator,
                     oracle: FitnessOracle | None = None, cfg: GuidanceConfig | None = None,
                     max_jumps: int = MAX_JUMPS) -> np.ndarray:
    """End-state indices of ``n`` independent (guided) Gillespie runs from ``x0``."""
    if x0.space != model.space:
        raise ValueError("start sequence belongs to a different state space")
    table = _RateTable(model, oracle, cfg)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = _run(table, x0, t, rng, max_jumps, record=False)[0]
    return out


def empirical_distribution(space: StateSpace, indices) -> np.ndarray:
    return np.bincount(np.asarray(indices), minlength=space.num_states) / len(indices)


# -- brute-force guided kernel -------------------------------------------------------------


def tilted_generator(Q: FullGenerator, oracle: FitnessOracle, cfg: GuidanceConfig) -> FullGenerator:
    """Full generator with every row tilted by the guidance factors, diagonals renormalised."""
    space = Q.space
    rates = np.array(Q.neighbor_rates)
    if cfg.gamma != 0:
        for i, x in enumerate(space):
            rates[i] *= np.exp(tilt_log_factors(oracle, cfg, x))
    return FullGenerator.from_neighbor_rates(space, rates)


def exact_guided_distribution(Q: FullGenerator, oracle: FitnessOracle, cfg: GuidanceConfig,
                              x: Sequence, t: float, expm: ExpmConfig = DEFAULT_EXPM) -> TransitionDistribution:
    tilted = tilted_generator(Q, oracle, cfg)
    return TransitionDistribution(Q.space, expm_row(tilted, x.index, t, expm))


# -- budgeted and per-site samplers -------------------------------------------------------------


def fixed_step_gillespie(model, x0: Sequence, n_steps: int, rng: np.random.Generator,
                         oracle: FitnessOracle | None = None, cfg: GuidanceConfig | None = None,
                         site_mask=None) -> Sequence:
    """Take exactly ``n_steps`` jump-chain moves, optionally restricted to ``site_mask``."""
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    space = model.space
    allowed = None
    if site_mask is not None:
        allowed = np.zeros(space.length, dtype=bool)
        allowed[list(site_mask)] = True
        allowed = np.repeat(allowed, space.alphabet.size - 1)
    x = x0
    for _ in range(n_steps):
        rates = tilted_jump_rates(model, oracle, cfg, x)
        if allowed is not None:
            rates = np.where(allowed, rates, 0.0)
        cum = np.cumsum(rates)
        if cum[-1] <= 0:
            raise ValueError(f"no admissible mutation out of {x} under the site mask")
        j = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        site, k = divmod(j, space.alphabet.size - 1)
        old = x.symbols[site]
        x = x.mutate(site, k if k < old else k + 1)
    return x


def sample_factorized(model: FactorizedModel, x: Sequence, t: float, rng: np.random.Generator,
                      cfg: ExpmConfig = DEFAULT_EXPM) -> Sequence:
    """Draw each site independently from its row of ``exp(t Q(x)_l)``."""
    kernels = expm_generator(model.site_rates(x.index), t, cfg)
    out = []
    for l, a in enumerate(x.symbols):
        row = kernels[l, a]
        out.append(min(int(np.searchsorted(np.cumsum(row), rng.random() * row.sum(), side="right")),
                       len(row) - 1))
    return Sequence(model.space, tuple(out))


def simulate_tree(model, root: Sequence, tree: TreeNode, rng: np.random.Generator,
                  oracle: FitnessOracle | None = None, cfg: GuidanceConfig | None = None,
                  method: str = "gillespie") -> dict[str, Sequence]:
    """Sample every node's sequence by walking the edges breadth first from the root.

    ``method="matexp"`` draws each edge from the per-site factorized kernel instead.
    """
    if method not in ("gillespie", "matexp"):
        raise ValueError(f"unknown sampling method {method!r}")
    if method == "matexp" and oracle is not None and cfg is not None and cfg.gamma != 0:
        raise ValueError("guidance needs the Gillespie sampler")
    table = _RateTable(model, oracle, cfg)
    out = {tree.name: root}
    for parent, child in tree.edges():
        x = out[parent.name]
        if method == "gillespie":
            y, _ = guided_gillespie(model, oracle, cfg, x, child.branch_length, rng, _table=table)
        else:
            y = sample_factorized(model, x, child.branch_length, rng)
        out[child.name] = y
    return out
