"""Seeded experiment drivers: epistasis sweep, sampling-error curves and tree fidelity.

Every stochastic stage draws its seed from :func:`derive_seed` keyed on the
master seed and the cell coordinates, so a cell's result does not depend on
which worker ran it or in what order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from contextlib import contextmanager
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import SamplingCurves, default_t_grid, frobenius_relative_error, sampling_error_curves
from .estimation import Estimator, TrainingConfig, fit, generate_dataset
from .generators import build_factorized_truth, build_state_dependent_truth, interpolate_truth
from .io import write_csv
from .kernels import ExpmConfig, matched_model
from .rng import derive_seed, make_rng
from .samplers import guided_gillespie, simulate_tree
from .state_space import StateSpace, hamming_distance
from .trees import TreeNode, load_tree

log = logging.getLogger(__name__)

DESK_SAMPLES = 100_000
PAPER_SAMPLES = 2_500_000

# stream keys passed to derive_seed after (master, replicate)
_FACT_TRUTH, _DEP_TRUTH, _DATA, _FIT, _TREE = 0, 1, 2, 3, 4


@dataclass
class SweepConfig:
    epsilon_levels: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    replicates: int = 3
    samples: int = DESK_SAMPLES
    branch_rate: float = 0.5
    estimators: list[str] = field(default_factory=lambda: [e.value for e in Estimator])
    master_seed: int = 0
    snr_delta: float | None = None  # None: 1 - epsilon per cell
    max_epochs: int = 1000
    expm_method: str = "uniformization"
    expm_tol: float = 1e-12

    def __post_init__(self):
        self.epsilon_levels = [float(e) for e in self.epsilon_levels]
        if not self.epsilon_levels:
            raise ValueError("need at least one epsilon level")
        if any(not 0.0 <= e <= 1.0 for e in self.epsilon_levels):
            raise ValueError(f"epsilon levels must lie in [0, 1], got {self.epsilon_levels}")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if not self.branch_rate > 0:
            raise ValueError("branch_rate must be positive")
        self.estimators = [Estimator(e).value for e in self.estimators]
        if not self.estimators:
            raise ValueError("need at least one estimator")

    @property
    def expm(self) -> ExpmConfig:
        return ExpmConfig(method=self.expm_method, truncation_tol=self.expm_tol)

    @classmethod
    def paper_scale(cls, **kw) -> "SweepConfig":
        return cls(samples=PAPER_SAMPLES, **kw)


# -- manifests ------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__
    timings: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        """Digest of everything that determines the outputs (not paths or timings)."""
        payload = json.dumps({"command": self.command, "config": self.config, "seeds": self.seeds,
                              "version": self.version}, sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def add(self, path, out_dir) -> None:
        self.artifacts.append(str(Path(path).relative_to(out_dir)))

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        missing = [a for a in self.artifacts if not (out_dir / a).exists()]
        if missing:
            raise FileNotFoundError(f"manifest lists missing artifacts: {missing}")
        doc = asdict(self)
        doc["hash"] = self.hash
        doc["python"] = platform.python_version()
        doc["numpy"] = np.__version__
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        return path


def _pool_map(fn, jobs: list, threads: int) -> list:
    """Ordered map; results come back in job order whatever the worker count."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def cell_truth(space: StateSpace, master_seed: int, replicate: int, epsilon: float):
    """Interpolated ground truth; both endpoints are keyed on the replicate only."""
    q_fact = build_factorized_truth(space, derive_seed(master_seed, replicate, _FACT_TRUTH))
    q_dep = build_state_dependent_truth(space, derive_seed(master_seed, replicate, _DEP_TRUTH))
    return interpolate_truth(q_fact, q_dep, epsilon)


# -- epistasis sweep ------------------------------------------------------------------------

SWEEP_COLUMNS = ["epsilon", "replicate", "estimator", "error", "samples", "seed", "status"]
SWEEP_UNITS = {"epsilon": "fraction", "replicate": "index", "estimator": "name",
               "error": "relative Frobenius", "samples": "records", "seed": "int", "status": "text"}


def _sweep_cell(job) -> list[tuple]:
    cfg, ei, rep = job
    eps = cfg.epsilon_levels[ei]
    space = StateSpace.codons()
    data_seed = derive_seed(cfg.master_seed, rep, _DATA, ei)
    rows = []
    try:
        truth = cell_truth(space, cfg.master_seed, rep, eps)
        data = generate_dataset(truth, cfg.samples, cfg.branch_rate, make_rng(data_seed),
                                expm_cfg=cfg.expm)
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        log.exception("cell eps=%s rep=%d failed while building data", eps, rep)
        return [(eps, rep, est, math.nan, cfg.samples, derive_seed(cfg.master_seed, rep, _FIT, ei, k),
                 f"failed: {exc}") for k, est in enumerate(cfg.estimators)]
    for k, est in enumerate(cfg.estimators):
        seed = derive_seed(cfg.master_seed, rep, _FIT, ei, k)
        delta = cfg.snr_delta if cfg.snr_delta is not None else 1.0 - eps
        tc = TrainingConfig(estimator=est, seed=seed, snr_delta=delta, max_epochs=cfg.max_epochs,
                            expm_tol=cfg.expm_tol)
        try:
            result = fit(data, tc)
            err = frobenius_relative_error(result.estimated_generator(), truth)
            rows.append((eps, rep, est, err, cfg.samples, seed, "ok"))
        except Exception as exc:  # noqa: BLE001
            log.warning("cell eps=%s rep=%d estimator=%s failed: %s", eps, rep, est, exc)
            rows.append((eps, rep, est, math.nan, cfg.samples, seed, f"failed: {exc}"))
    return rows


def run_epistasis_sweep(cfg: SweepConfig, out_dir=None, threads: int = 1,
                        manifest: RunManifest | None = None) -> list[dict]:
    """Fit every estimator on one shared dataset per (epsilon, replicate) cell."""
    jobs = [(cfg, ei, rep) for ei in range(len(cfg.epsilon_levels)) for rep in range(cfg.replicates)]
    rows = [row for cell in _pool_map(_sweep_cell, jobs, threads) for row in cell]
    if out_dir is not None:
        path = write_csv(Path(out_dir) / "sweep.csv", SWEEP_COLUMNS, rows, SWEEP_UNITS,
                         manifest.hash if manifest else None)
        if manifest:
            manifest.add(path, out_dir)
    return [dict(zip(SWEEP_COLUMNS, r)) for r in rows]


# -- sampling-error comparison --------------------------------------------------------------

CURVE_COLUMNS = ["t", "kl_gillespie", "kl_matexp"]
CURVE_UNITS = {"t": "branch length (expected substitutions per site)", "kl_gillespie": "nats",
               "kl_matexp": "nats"}


def _sampling_cell(job) -> SamplingCurves:
    cfg, ei = job
    expm = cfg.expm
    eps = cfg.epsilon_levels[ei]
    truth = cell_truth(StateSpace.codons(), cfg.master_seed, 0, eps)
    data = generate_dataset(truth, cfg.samples, cfg.branch_rate,
                            make_rng(derive_seed(cfg.master_seed, 0, _DATA, ei)), expm_cfg=expm)
    tc = TrainingConfig(estimator=Estimator.FACTORIZED, seed=derive_seed(cfg.master_seed, 0, _FIT, ei, 0),
                        max_epochs=cfg.max_epochs, expm_tol=cfg.expm_tol)
    model = fit(data, tc).model
    return sampling_error_curves(truth, model, default_t_grid(), expm)


def run_sampling_comparison(cfg: SweepConfig, out_dir=None, threads: int = 1,
                            manifest: RunManifest | None = None) -> dict[float, SamplingCurves]:
    """Fit a FACTORIZED model per epsilon and compare its two samplers against the truth."""
    jobs = [(cfg, ei) for ei in range(len(cfg.epsilon_levels))]
    curves = dict(zip(cfg.epsilon_levels, _pool_map(_sampling_cell, jobs, threads)))
    if out_dir is not None:
        for eps, c in curves.items():
            path = write_csv(Path(out_dir) / f"sampling_eps{eps:g}.csv", CURVE_COLUMNS, c.rows(), CURVE_UNITS,
                             manifest.hash if manifest else None, meta={"epsilon": eps})
            if manifest:
                manifest.add(path, out_dir)
    return curves


# -- tree fidelity ----------------------------------------------------------------------------

TREE_COLUMNS = ["tree", "leaf", "root_distance_reference", "distance_gillespie", "distance_matexp", "closer"]


def default_tree() -> TreeNode:
    """The shipped 13-leaf example topology (its branch lengths are synthetic)."""
    return load_tree(resources.files("pointmut") / "data" / "test_tree_13.nwk")


@dataclass
class TreeFidelity:
    rows: list[tuple]
    gillespie_closer: float
    matexp_closer: float
    ties: float
    root_corr_gillespie: float
    root_corr_matexp: float


def _corr(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


def run_tree_fidelity(cfg: SweepConfig, trees: list[TreeNode], epsilon: float = 1.0, out_dir=None,
                      manifest: RunManifest | None = None) -> TreeFidelity:
    """Compare Gillespie and per-site matrix-exponential leaves with truth-simulated references.

    The model is the matched-row factorization of the truth, so Gillespie
    reproduces the truth exactly while the per-site sampler does not. Each
    leaf is scored by which sampler lands at the smaller Hamming distance
    from the reference leaf.
    """
    space = StateSpace.codons()
    truth = cell_truth(space, cfg.master_seed, 0, epsilon)
    model = matched_model(truth)
    rows = []
    root_ref, root_g, root_m = [], [], []
    for k, tree in enumerate(trees):
        rng = make_rng(derive_seed(cfg.master_seed, k, _TREE))
        root = space.index_to_sequence(int(rng.integers(space.num_states)))
        ref = _simulate_truth(truth, root, tree, rng)
        gil = simulate_tree(model, root, tree, rng, method="gillespie")
        mat = simulate_tree(model, root, tree, rng, method="matexp")
        for leaf in tree.leaves():
            dg = hamming_distance(gil[leaf.name], ref[leaf.name])
            dm = hamming_distance(mat[leaf.name], ref[leaf.name])
            closer = "gillespie" if dg < dm else "matexp" if dm < dg else "tie"
            d_ref = hamming_distance(root, ref[leaf.name])
            rows.append((k, leaf.name, d_ref, dg, dm, closer))
            root_ref.append(d_ref)
            root_g.append(hamming_distance(root, gil[leaf.name]))
            root_m.append(hamming_distance(root, mat[leaf.name]))
    n = len(rows)
    frac = {c: (sum(r[-1] == c for r in rows) / n if n else 0.0) for c in ("gillespie", "matexp", "tie")}
    if n == 0:
        frac["tie"] = 1.0
    summary = TreeFidelity(rows, frac["gillespie"], frac["matexp"], frac["tie"],
                           _corr(root_ref, root_g), _corr(root_ref, root_m))
    if out_dir is not None:
        meta = {"epsilon": epsilon, "gillespie_closer": summary.gillespie_closer,
                "matexp_closer": summary.matexp_closer, "ties": summary.ties,
                "root_corr_gillespie": summary.root_corr_gillespie, "root_corr_matexp": summary.root_corr_matexp}
        path = write_csv(Path(out_dir) / "tree_fidelity.csv", TREE_COLUMNS, rows,
                         {"tree": "index", "leaf": "name", "root_distance_reference": "sites",
                          "distance_gillespie": "sites", "distance_matexp": "sites", "closer": "label"},
                         manifest.hash if manifest else None, meta)
        if manifest:
            manifest.add(path, out_dir)
    return summary


def _simulate_truth(truth, root, tree: TreeNode, rng) -> dict:
    out = {tree.name: root}
    for parent, child in tree.edges():
        out[child.name], _ = guided_gillespie(truth, None, None, out[parent.name], child.branch_length, rng)
    return out


@contextmanager
def timed(timings: dict, name: str):
    """Record the wall-clock seconds spent in the block under ``timings[name]``."""
    t0 = time.perf_counter()
    try:
        yield
    finally:
        timings[name] = round(time.perf_counter() - t0, 3)
