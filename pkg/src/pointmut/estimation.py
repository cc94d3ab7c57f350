"""Maximum-likelihood fitting of full and factorized rate models.

Records are tallied by (branch length, parent, child) so one likelihood
evaluation costs a single uniformization sweep no matter how many records
share a branch length. Gradients run the same sweep in reverse: with the
uniformization rate ``lam`` held fixed, ``exp(tQ) = sum_n w_n(lam t) R^n`` is an
exact identity in ``Q``, so back-propagating through the powers of
``R = I + Q / lam`` gives the exact derivative of the matrix exponential.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .generators import (
    RATE_FLOOR,
    FactorizedModel,
    FullGenerator,
    softplus,
    softplus_grad,
    tabular_rates,
)
from .kernels import expm_generator, uniformization_weights
from .rng import make_rng
from .state_space import StateSpace, TransitionRecord

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
DEFAULT_BINS = 512


class Estimator(str, enum.Enum):
    FULL_MLE = "full_mle"
    FACTORIZED = "factorized"
    FACTORIZED_SNR = "factorized_snr"


class FitDivergence(RuntimeError):
    pass


# -- datasets ------------------------------------------------------------------------


@dataclass
class TransitionDataset:
    """Observed transitions stored column-wise as state indices and branch lengths."""

    space: StateSpace
    parents: np.ndarray
    children: np.ndarray
    branch_lengths: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.children = np.asarray(self.children, dtype=np.int64)
        self.branch_lengths = np.asarray(self.branch_lengths, dtype=float)
        n = len(self.parents)
        if len(self.children) != n or len(self.branch_lengths) != n:
            raise ValueError("parents, children and branch lengths must have equal length")
        for arr in (self.parents, self.children):
            if n and (arr.min() < 0 or arr.max() >= self.space.num_states):
                raise ValueError("state index out of range")
        if not np.all(np.isfinite(self.branch_lengths)) or np.any(self.branch_lengths < 0):
            raise ValueError("branch lengths must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.parents)

    @classmethod
    def from_records(cls, records: list[TransitionRecord], metadata: dict | None = None) -> "TransitionDataset":
        if not records:
            raise ValueError("dataset needs at least one record")
        space = records[0].parent.space
        if any(r.parent.space != space for r in records):
            raise ValueError("records live on different state spaces")
        return cls(
            space,
            [r.parent.index for r in records],
            [r.child.index for r in records],
            [r.branch_length for r in records],
            metadata or {},
        )

    @property
    def records(self) -> list[TransitionRecord]:
        s = self.space
        return [
            TransitionRecord(s.index_to_sequence(x), s.index_to_sequence(y), float(t))
            for x, y, t in zip(self.parents, self.children, self.branch_lengths)
        ]

    def subset(self, idx) -> "TransitionDataset":
        return TransitionDataset(self.space, self.parents[idx], self.children[idx],
                                 self.branch_lengths[idx], dict(self.metadata))


def exponential_bins(rate: float, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-probability bin edges of Exp(rate) and each bin's conditional mean."""
    q = np.arange(bins + 1) / bins
    with np.errstate(divide="ignore"):
        edges = -np.log1p(-q) / rate
    a, b = edges[:-1], edges[1:]
    ea, eb = np.exp(-rate * a), np.exp(-rate * b)
    finite = np.isfinite(b)
    with np.errstate(invalid="ignore"):
        inner = np.where(finite, (a * ea - np.where(finite, b, 0.0) * eb) / (ea - eb), a)
    return edges, inner + 1.0 / rate


def generate_dataset(Q_true: FullGenerator, n: int, branch_rate: float, rng,
                     bins: int | None = DEFAULT_BINS, expm_cfg=None) -> TransitionDataset:
    """Simulate ``n`` transitions: uniform parent, ``t ~ Exp(branch_rate)``, child from ``exp(tQ)``.

    With ``bins`` set, branch lengths are replaced by the conditional mean of
    their Exp quantile bin so only ``bins`` exact kernels are needed.
    """
    if n < 1:
        raise ValueError("need at least one record")
    if not branch_rate > 0:
        raise ValueError("branch rate must be positive")
    rng = make_rng(rng)
    space = Q_true.space
    S = space.num_states
    raw_t = rng.exponential(1.0 / branch_rate, size=n)
    parents = rng.integers(0, S, size=n)
    u = rng.random(n)
    kw = {} if expm_cfg is None else {"cfg": expm_cfg}
    meta = {"branch_rate": branch_rate, "n": n}
    if bins:
        edges, reps = exponential_bins(branch_rate, bins)
        which = np.minimum((bins * -np.expm1(-branch_rate * raw_t)).astype(np.int64), bins - 1)
        t = reps[which]
        shift = float(np.max(np.abs(t - raw_t)))
        meta["quantization"] = {
            "bins": bins,
            "representative": "conditional_mean",
            "max_abs_shift": shift,
            "kernel_l1_bound": 2.0 * Q_true.max_exit_rate * shift,
        }
        groups = which
        times = reps
    else:
        t = raw_t
        groups = np.arange(n)
        times = raw_t
        meta["quantization"] = None
    children = np.empty(n, dtype=np.int64)
    order = np.argsort(groups, kind="stable")
    bounds = np.flatnonzero(np.diff(groups[order])) + 1
    for chunk in np.split(order, bounds):
        k = groups[chunk[0]]
        cum = np.cumsum(expm_generator(Q_true, float(times[k]), **kw), axis=1)
        cum[:, -1] = np.inf  # guards against a row summing to 1 - 1e-16
        rows = cum[parents[chunk]]
        children[chunk] = (rows <= u[chunk, None]).sum(axis=1)
    return TransitionDataset(space, parents, children, t, meta)


# -- tallies ------------------------------------------------------------------------------


def snr_weights(branch_lengths, delta: float | None) -> np.ndarray:
    t = np.asarray(branch_lengths, dtype=float)
    if delta is None:
        return np.ones_like(t)
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"SNR delta must lie in [0, 1], got {delta}")
    if delta == 0 and np.any(t == 0):
        raise ValueError("SNR weighting with delta = 0 is undefined for zero branch lengths")
    return 1.0 / (delta + t)


class _Tally:
    """Weighted counts of transitions grouped by distinct branch length."""

    def __init__(self, data: TransitionDataset, weights: np.ndarray):
        self.space = data.space
        self.n = len(data)
        self.times, self.k = np.unique(data.branch_lengths, return_inverse=True)
        self.k = self.k.reshape(-1)
        self.parents = data.parents
        self.children = data.children
        self.weights = np.asarray(weights, dtype=float)

    @property
    def full_counts(self) -> np.ndarray:
        S, K = self.space.num_states, len(self.times)
        flat = (self.k * S + self.parents) * S + self.children
        return np.bincount(flat, weights=self.weights, minlength=K * S * S).reshape(K, S, S)

    @property
    def site_counts(self) -> np.ndarray:
        """``(K, S * L, A)`` weighted counts of child symbol per (context, site)."""
        space = self.space
        S, L, A, K = space.num_states, space.length, space.alphabet.size, len(self.times)
        child_syms = space.state_table[self.children]  # (n, L)
        b = self.parents[:, None] * L + np.arange(L)[None, :]
        flat = (self.k[:, None] * (S * L) + b) * A + child_syms
        w = np.broadcast_to(self.weights[:, None], flat.shape)
        return np.bincount(flat.ravel(), weights=w.ravel(), minlength=K * S * L * A).reshape(K, S * L, A)


# -- objectives -------------------------------------------------------------------------------


def _log_floor(p: np.ndarray, diagnostics: dict | None) -> np.ndarray:
    hit = p < PROB_FLOOR
    if diagnostics is not None:
        diagnostics["floor_hits"] = diagnostics.get("floor_hits", 0) + int(hit.sum())
    return np.log(np.where(hit, PROB_FLOOR, p)), hit


class FullObjective:
    """Mean weighted negative log-likelihood of a full generator parameterised by softplus rates."""

    def __init__(self, data: TransitionDataset, weights=None, tol: float = 1e-12):
        self.space = data.space
        self.tally = _Tally(data, np.ones(len(data)) if weights is None else weights)
        self.counts = self.tally.full_counts
        self.tol = tol
        neighbors, _, _ = self.space.neighbor_table
        self.rows = np.repeat(np.arange(self.space.num_states), neighbors.shape[1])
        self.cols = neighbors.ravel()

    @property
    def num_params(self) -> int:
        return len(self.cols)

    def generator(self, theta) -> np.ndarray:
        S = self.space.num_states
        rates = np.maximum(softplus(theta), RATE_FLOOR)
        q = np.zeros((S, S))
        q[self.rows, self.cols] = rates
        q[np.arange(S), np.arange(S)] = -q.sum(axis=1)
        return q

    def __call__(self, theta, grad: bool = True, diagnostics: dict | None = None):
        return self.evaluate_generator(self.generator(theta), theta if grad else None, diagnostics)

    def evaluate_generator(self, q: np.ndarray, theta=None, diagnostics=None):
        S = q.shape[0]
        lam = max(float(np.max(-np.diag(q))), 1e-300)
        r = np.eye(S) + q / lam
        w = uniformization_weights(lam, self.tally.times, self.tol)  # (K, N)
        n_terms = w.shape[1]
        powers = np.empty((n_terms, S, S))
        powers[0] = np.eye(S)
        for n in range(1, n_terms):
            powers[n] = powers[n - 1] @ r
        p = (w @ powers.reshape(n_terms, -1)).reshape(-1, S, S)
        mask = self.counts != 0
        logp, hit = _log_floor(np.where(mask, p, 1.0), diagnostics)
        loss = -float((self.counts * logp).sum()) / self.tally.n
        if theta is None:
            return loss
        g = np.where(mask & ~hit, -self.counts / np.where(mask, p, 1.0), 0.0) / self.tally.n
        m = (w.T @ g.reshape(len(g), -1)).reshape(n_terms, S, S)
        adj = m[-1]
        grad_r = np.zeros((S, S))
        for n in range(n_terms - 1, 0, -1):
            grad_r += powers[n - 1].T @ adj
            adj = m[n - 1] + adj @ r.T
        grad_q = grad_r / lam
        dq = grad_q[self.rows, self.cols] - grad_q[self.rows, self.rows]
        active = softplus(theta) > RATE_FLOOR
        return loss, np.where(active, dq * softplus_grad(theta), 0.0)


class FactorizedObjective:
    """Mean weighted negative log-likelihood of a tabular factorized model.

    Each record contributes ``-sum_l log exp(t Q(x)_l)[x_l, y_l]``.
    """

    def __init__(self, data: TransitionDataset, weights=None, tol: float = 1e-12):
        self.space = data.space
        self.tally = _Tally(data, np.ones(len(data)) if weights is None else weights)
        self.counts = self.tally.site_counts  # (K, S*L, A)
        self.tol = tol
        # row of each (context, site) block that the likelihood reads: the context's own symbol
        self.own = self.space.state_table.reshape(-1)

    @property
    def shape(self) -> tuple[int, ...]:
        A = self.space.alphabet.size
        return (self.space.num_states, self.space.length, A, A)

    def __call__(self, theta, grad: bool = True, diagnostics: dict | None = None):
        theta = np.asarray(theta, dtype=float).reshape(self.shape)
        return self.evaluate_rates(tabular_rates(theta), theta if grad else None, diagnostics)

    def evaluate_rates(self, q: np.ndarray, theta=None, diagnostics=None):
        S, L, A, _ = q.shape
        B = S * L
        q = q.reshape(B, A, A)
        lam = max(float(np.max(-np.diagonal(q, axis1=1, axis2=2))), 1e-300)
        r = np.eye(A)[None] + q / lam
        w = uniformization_weights(lam, self.tally.times, self.tol)  # (K, N)
        n_terms = w.shape[1]
        rows = np.empty((n_terms, B, A))
        rows[0] = np.eye(A)[self.own]
        for n in range(1, n_terms):
            rows[n] = np.einsum("bi,bij->bj", rows[n - 1], r)
        p = (w @ rows.reshape(n_terms, -1)).reshape(-1, B, A)
        mask = self.counts != 0
        logp, hit = _log_floor(np.where(mask, p, 1.0), diagnostics)
        loss = -float((self.counts * logp).sum()) / self.tally.n
        if theta is None:
            return loss
        g = np.where(mask & ~hit, -self.counts / np.where(mask, p, 1.0), 0.0) / self.tally.n
        m = (w.T @ g.reshape(len(g), -1)).reshape(n_terms, B, A)
        adj = m[-1]
        grad_r = np.zeros((B, A, A))
        for n in range(n_terms - 1, 0, -1):
            grad_r += rows[n - 1][:, :, None] * adj[:, None, :]
            adj = m[n - 1] + np.einsum("bij,bj->bi", r, adj)
        grad_q = (grad_r / lam).reshape(S, L, A, A)
        diag = np.diagonal(grad_q, axis1=2, axis2=3)[..., None]
        off = ~np.eye(A, dtype=bool)
        active = softplus(theta) > RATE_FLOOR
        return loss, np.where(off & active, (grad_q - diag) * softplus_grad(theta), 0.0)


def nll_full(Q: FullGenerator, dataset: TransitionDataset, snr_delta: float | None = None,
             diagnostics: dict | None = None) -> float:
    """Mean of ``-log exp(tQ)[x, y]`` over records, optionally weighted by ``1 / (delta + t)``."""
    obj = FullObjective(dataset, snr_weights(dataset.branch_lengths, snr_delta))
    return obj.evaluate_generator(Q.dense(), diagnostics=diagnostics)


def nll_factorized(model: FactorizedModel, dataset: TransitionDataset, snr_delta: float | None = None,
                   diagnostics: dict | None = None) -> float:
    """Mean of ``-sum_l log exp(t Q(x)_l)[x_l, y_l]`` over records, optionally SNR-weighted."""
    obj = FactorizedObjective(dataset, snr_weights(dataset.branch_lengths, snr_delta))
    return obj.evaluate_rates(np.asarray(model.all_site_rates), diagnostics=diagnostics)


# -- optimisation -------------------------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainingConfig:
    estimator: Estimator = Estimator.FACTORIZED
    learning_rate: float | None = None  # 0.1 for FULL_MLE, 0.01 otherwise
    max_epochs: int = 1000
    patience: int = 50
    snr_delta: float = 0.5
    batch_size: int | None = None  # None: one full-batch step per epoch
    validation_fraction: float = 0.1
    seed: int = 0
    init_scale: float = 0.1
    expm_tol: float = 1e-12

    def __post_init__(self):
        self.estimator = Estimator(self.estimator)
        if self.learning_rate is None:
            self.learning_rate = 0.1 if self.estimator is Estimator.FULL_MLE else 0.01
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if not 0.0 <= self.snr_delta <= 1.0:
            raise ValueError("snr_delta must lie in [0, 1]")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator"] = self.estimator.value
        return d


@dataclass
class FitResult:
    model: FullGenerator | FactorizedModel
    params: np.ndarray
    train_loss_curve: list[float]
    validation_loss_curve: list[float]
    stopped_epoch: int
    best_epoch: int
    initial_train_loss: float
    final_train_loss: float
    config: TrainingConfig
    diagnostics: dict = field(default_factory=dict)

    def estimated_generator(self) -> FullGenerator:
        if isinstance(self.model, FullGenerator):
            return self.model
        return assemble_full_from_factorized(self.model)


def _split(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val == n:
        return perm, perm[:0]
    return perm[: n - n_val], perm[n - n_val:]


def fit(dataset: TransitionDataset, config: TrainingConfig) -> FitResult:
    """Adam on the selected loss with early stopping on a held-out split."""
    if len(dataset) == 0:
        raise ValueError("cannot fit an empty dataset")
    rng = make_rng(config.seed)
    train_idx, val_idx = _split(len(dataset), config.validation_fraction, rng)
    train, val = dataset.subset(train_idx), dataset.subset(val_idx)
    delta = config.snr_delta if config.estimator is Estimator.FACTORIZED_SNR else None

    if config.estimator is Estimator.FULL_MLE:
        make_obj = lambda d: FullObjective(d, snr_weights(d.branch_lengths, delta), config.expm_tol)
    else:
        make_obj = lambda d: FactorizedObjective(d, snr_weights(d.branch_lengths, delta), config.expm_tol)
    train_obj = make_obj(train)
    val_obj = make_obj(val) if len(val) else None
    if config.estimator is Estimator.FULL_MLE:
        shape = (train_obj.num_params,)
    else:
        shape = train_obj.shape
    theta = rng.normal(0.0, config.init_scale, size=shape)
    if config.estimator is not Estimator.FULL_MLE:
        theta[..., np.arange(shape[-1]), np.arange(shape[-1])] = 0.0

    opt = Adam(config.learning_rate)
    diagnostics: dict = {}
    train_curve, val_curve = [], []
    best = (math.inf, theta.copy(), 0)
    initial = None
    epoch = 0
    stale = 0
    try:
        for epoch in range(1, config.max_epochs + 1):
            if config.batch_size is None or config.batch_size >= len(train):
                loss, grad = train_obj(theta)
                _check_finite(loss, grad, epoch, theta)
                theta = opt.step(theta, grad)
                epoch_loss = loss
            else:
                perm = rng.permutation(len(train))
                losses = []
                for start in range(0, len(train), config.batch_size):
                    batch = make_obj(train.subset(perm[start:start + config.batch_size]))
                    loss, grad = batch(theta)
                    _check_finite(loss, grad, epoch, theta)
                    theta = opt.step(theta, grad)
                    losses.append(loss)
                epoch_loss = float(np.mean(losses))
            if initial is None:
                initial = epoch_loss
            train_curve.append(float(epoch_loss))
            score = val_obj(theta, grad=False, diagnostics=diagnostics) if val_obj else train_obj(theta, grad=False)
            if not np.isfinite(score):
                raise FitDivergence(f"validation loss diverged at epoch {epoch} (|theta| = {np.linalg.norm(theta):.3g})")
            val_curve.append(float(score))
            if score < best[0]:
                best = (score, theta.copy(), epoch)
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    except FloatingPointError as exc:
        raise FitDivergence(f"rates blew up at epoch {epoch} (|theta| = {np.linalg.norm(theta):.3g}): {exc}") from exc
    _, theta_best, best_epoch = best
    final = train_obj(theta_best, grad=False)
    if config.estimator is Estimator.FULL_MLE:
        model = FullGenerator(dataset.space, train_obj.generator(theta_best))
    else:
        model = FactorizedModel.tabular(dataset.space, theta_best)
    log.info("fit %s stopped at epoch %d (best %d), train loss %.6g -> %.6g",
             config.estimator.value, epoch, best_epoch, initial, final)
    return FitResult(model, theta_best, train_curve, val_curve, epoch, best_epoch,
                     float(initial), float(final), config, diagnostics)


def _check_finite(loss, grad, epoch, theta):
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise FitDivergence(
            f"non-finite loss or gradient at epoch {epoch} (|theta| = {np.linalg.norm(theta):.3g})"
        )


def assemble_full_from_factorized(model: FactorizedModel) -> FullGenerator:
    """Query the model at every context: ``Q[x, y] = Q(x)_l[x_l, y_l]`` for single mutants ``y``."""
    return FullGenerator.from_neighbor_rates(model.space, model.jump_rates)
