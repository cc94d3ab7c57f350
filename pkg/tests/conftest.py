import numpy as np
import pytest

from pointmut.generators import build_factorized_truth, build_state_dependent_truth, interpolate_truth
from pointmut.state_space import Alphabet, StateSpace


@pytest.fixture(scope="session")
def codons():
    return StateSpace.codons()


@pytest.fixture(scope="session")
def binary3():
    return StateSpace(Alphabet.from_string("01"), 3)


@pytest.fixture(scope="session")
def truth_fact(codons):
    return build_factorized_truth(codons, 11)


@pytest.fixture(scope="session")
def truth_dep(codons):
    return build_state_dependent_truth(codons, 12)


@pytest.fixture(scope="session")
def truth_half(truth_fact, truth_dep):
    return interpolate_truth(truth_fact, truth_dep, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def benchmark_sweep():
    """Three replicates of every estimator at epsilon 0 and 1 with 10^5 records (shared by several tests)."""
    from pointmut.harness import SweepConfig, run_epistasis_sweep

    cfg = SweepConfig(epsilon_levels=[0.0, 1.0], replicates=3, samples=100_000, master_seed=2024, snr_delta=0.0)
    rows = run_epistasis_sweep(cfg)
    assert all(r["status"] == "ok" for r in rows), rows
    out = {}
    for r in rows:
        out.setdefault((r["epsilon"], r["estimator"]), []).append(r["error"])
    return {k: np.array(v) for k, v in out.items()}
