import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import chisquare

from pointmut.estimation import (
    Adam,
    Estimator,
    FactorizedObjective,
    FitDivergence,
    FullObjective,
    TrainingConfig,
    TransitionDataset,
    assemble_full_from_factorized,
    exponential_bins,
    fit,
    generate_dataset,
    nll_factorized,
    nll_full,
    snr_weights,
)
from pointmut.generators import (
    FactorizedModel,
    FullGenerator,
    build_state_dependent_truth,
    draw_site_matrices,
    kronecker_sum,
    softplus,
)
from pointmut.kernels import match_rows_to_truth
from pointmut.rng import make_rng
from pointmut.state_space import TransitionRecord

from helpers import central_difference


@pytest.fixture(scope="module")
def big_dataset(truth_half):
    return generate_dataset(truth_half, 100_000, 0.5, make_rng(7))


@pytest.fixture(scope="module")
def small_dataset(truth_half):
    return generate_dataset(truth_half, 20, 0.5, make_rng(8), bins=None)


# -- data generation ----------------------------------------------------------------------


def test_branch_length_mean(big_dataset):
    t = big_dataset.branch_lengths
    assert np.all(t >= 0)
    assert abs(t.mean() - 2.0) < 3 * t.std() / np.sqrt(len(t))


def test_parents_uniform(big_dataset):
    freq = np.bincount(big_dataset.parents, minlength=64) / len(big_dataset)
    se = np.sqrt((1 / 64) * (63 / 64) / len(big_dataset))
    assert np.all(np.abs(freq - 1 / 64) < 3.5 * se)


def test_dataset_metadata_and_determinism(truth_half, big_dataset):
    q = big_dataset.metadata["quantization"]
    assert q["bins"] == 512 and q["representative"] == "conditional_mean"
    assert q["kernel_l1_bound"] >= 0
    again = generate_dataset(truth_half, 100_000, 0.5, make_rng(7))
    assert np.array_equal(again.children, big_dataset.children)
    assert len(np.unique(big_dataset.branch_lengths)) <= 512


def test_exponential_bins():
    edges, means = exponential_bins(0.5, 8)
    assert edges[0] == 0 and np.isinf(edges[-1])
    assert np.all((means > edges[:-1]) & (means < np.where(np.isinf(edges[1:]), np.inf, edges[1:])))
    # equal-probability bins: the conditional means average to the Exp mean
    assert means.mean() == pytest.approx(2.0, rel=1e-12)


def test_child_distribution_matches_kernel(truth_half):
    data = generate_dataset(truth_half, 200_000, 0.5, make_rng(3), bins=4)
    t = np.unique(data.branch_lengths)[1]
    sel = (data.branch_lengths == t) & (data.parents == 5)
    observed = np.bincount(data.children[sel], minlength=64)
    expected = expm(t * truth_half.dense())[5] * sel.sum()
    assert chisquare(observed, expected).pvalue > 1e-3


def test_dataset_validation(codons):
    with pytest.raises(ValueError):
        TransitionDataset(codons, [0], [1], [-1.0])
    with pytest.raises(ValueError):
        TransitionDataset(codons, [0], [64], [1.0])
    with pytest.raises(ValueError):
        generate_dataset(kronecker_sum(draw_site_matrices(codons, 1), codons), 0, 0.5, make_rng(0))
    rec = TransitionRecord(codons.parse("AAA"), codons.parse("AAC"), 0.4)
    data = TransitionDataset.from_records([rec, rec])
    assert data.records[0] == rec


# -- likelihoods ----------------------------------------------------------------------------


def test_self_transitions_small_t(codons, truth_half):
    data = TransitionDataset(codons, np.arange(64), np.arange(64), np.full(64, 1e-9))
    assert nll_full(truth_half, data) < 1e-7
    model = FactorizedModel.context_free(codons, draw_site_matrices(codons, 0))
    assert nll_factorized(model, data) < 1e-7


def test_nll_full_matches_direct(small_dataset, truth_half):
    q = truth_half.dense()
    direct = -np.mean([np.log(expm(t * q)[x, y]) for x, y, t in
                       zip(small_dataset.parents, small_dataset.children, small_dataset.branch_lengths)])
    assert nll_full(truth_half, small_dataset) == pytest.approx(direct, rel=1e-10)


def test_nll_factorized_matches_direct(small_dataset, codons):
    rng = np.random.default_rng(0)
    model = FactorizedModel.tabular(codons, rng.normal(size=(64, 3, 4, 4)))
    table = codons.state_table
    direct = 0.0
    for x, y, t in zip(small_dataset.parents, small_dataset.children, small_dataset.branch_lengths):
        rates = model.site_rates(int(x))
        direct -= sum(np.log(expm(t * rates[l])[table[x, l], table[y, l]]) for l in range(3))
    assert nll_factorized(model, small_dataset) == pytest.approx(direct / 20, rel=1e-10)


def test_constant_t_snr_is_scaling(codons, truth_half):
    data = generate_dataset(truth_half, 500, 0.5, make_rng(1))
    data = TransitionDataset(codons, data.parents, data.children, np.full(500, 1.3))
    plain, weighted = nll_full(truth_half, data), nll_full(truth_half, data, snr_delta=1.0)
    assert weighted == pytest.approx(plain / 2.3, rel=1e-13)


def test_unit_weights_equal_unweighted(small_dataset, codons):
    model = FactorizedModel.tabular(codons, np.random.default_rng(1).normal(size=(64, 3, 4, 4)))
    ones = FactorizedObjective(small_dataset, np.ones(len(small_dataset)))
    assert ones(model.params, grad=False) == nll_factorized(model, small_dataset)


def test_snr_weights():
    assert np.allclose(snr_weights([0.5, 1.0], 0.5), [1.0, 1 / 1.5])
    assert np.array_equal(snr_weights([0.5], None), [1.0])
    with pytest.raises(ValueError):
        snr_weights([0.0], 0.0)
    with pytest.raises(ValueError):
        snr_weights([1.0], 2.0)


def test_true_generator_beats_perturbations(truth_half, big_dataset):
    base = nll_full(truth_half, big_dataset)
    rng = np.random.default_rng(2)
    rates = truth_half.neighbor_rates
    for _ in range(20):
        noisy = rates * np.exp(rng.normal(0, 0.2, size=rates.shape))
        assert base <= nll_full(FullGenerator.from_neighbor_rates(truth_half.space, noisy), big_dataset)


def test_floor_diagnostics(codons):
    model = FactorizedModel.context_free(codons, np.zeros((3, 4, 4)))
    data = TransitionDataset(codons, [0], [1], [1.0])
    diag = {}
    loss = nll_factorized(model, data, diagnostics=diag)
    assert diag["floor_hits"] == 1 and np.isfinite(loss)


# -- gradients -----------------------------------------------------------------------------


@pytest.mark.parametrize("delta", [None, 0.3])
def test_full_gradient(small_dataset, delta):
    obj = FullObjective(small_dataset, snr_weights(small_dataset.branch_lengths, delta))
    theta = np.random.default_rng(3).normal(0, 0.5, size=obj.num_params)
    _, grad = obj(theta)
    fd = central_difference(lambda th: obj(th, grad=False), theta)
    assert np.max(np.abs(grad - fd)) <= 1e-4 * np.max(np.abs(fd))


@pytest.mark.parametrize("delta", [None, 0.0])
def test_factorized_gradient(small_dataset, delta):
    obj = FactorizedObjective(small_dataset, snr_weights(small_dataset.branch_lengths, delta))
    theta = np.random.default_rng(4).normal(0, 0.5, size=obj.shape)
    _, grad = obj(theta)
    # only contexts that appear as parents carry gradient
    used = np.unique(small_dataset.parents)
    sub = theta[used].copy()

    def loss(block):
        full = theta.copy()
        full[used] = block
        return obj(full, grad=False)

    fd = central_difference(loss, sub)
    assert np.max(np.abs(grad[used] - fd)) <= 1e-4 * np.max(np.abs(fd))
    others = np.setdiff1d(np.arange(64), used)
    assert np.all(grad[others] == 0)


# -- fitting --------------------------------------------------------------------------------


def test_training_config():
    assert TrainingConfig(estimator="full_mle").learning_rate == 0.1
    assert TrainingConfig(estimator="factorized").learning_rate == 0.01
    for bad in ({"learning_rate": 0.0}, {"patience": 0}, {"snr_delta": 1.5}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)


def test_adam_minimises_quadratic():
    opt = Adam(0.1)
    x = np.array([3.0, -2.0])
    for _ in range(500):
        x = opt.step(x, 2 * x)
    assert np.max(np.abs(x)) < 1e-2


@pytest.mark.parametrize("estimator", list(Estimator))
def test_fit_contract(truth_half, estimator):
    data = generate_dataset(truth_half, 3000, 0.5, make_rng(5))
    cfg = TrainingConfig(estimator=estimator, max_epochs=25, seed=3, snr_delta=0.5)
    a, b = fit(data, cfg), fit(data, cfg)
    assert np.array_equal(a.params, b.params)
    assert a.stopped_epoch <= 25 and 1 <= a.best_epoch <= a.stopped_epoch
    assert np.all(np.isfinite(a.train_loss_curve)) and np.all(np.isfinite(a.validation_loss_curve))
    assert a.final_train_loss <= a.initial_train_loss
    q = a.estimated_generator()
    assert isinstance(q, FullGenerator)


def test_fit_minibatch_path(truth_half):
    data = generate_dataset(truth_half, 1000, 0.5, make_rng(6))
    res = fit(data, TrainingConfig(estimator="factorized", batch_size=256, max_epochs=3))
    assert len(res.train_loss_curve) == res.stopped_epoch == 3


def test_fit_divergence_reported(truth_half):
    data = generate_dataset(truth_half, 500, 0.5, make_rng(6))
    with pytest.raises(FitDivergence, match="epoch"):
        fit(data, TrainingConfig(estimator="full_mle", learning_rate=1e300, max_epochs=5))


def test_fit_recovers_rates_with_plenty_of_data(truth_half):
    data = generate_dataset(truth_half, 100_000, 0.5, make_rng(9))
    res = fit(data, TrainingConfig(estimator="full_mle", seed=1))
    from pointmut.analysis import frobenius_relative_error

    assert frobenius_relative_error(res.model, truth_half) < 0.15


def test_full_mle_consistency(codons):
    from pointmut.analysis import frobenius_relative_error

    truth = build_state_dependent_truth(codons, 31)
    errors = []
    for n in (10_000, 100_000, 1_000_000):
        data = generate_dataset(truth, n, 0.5, make_rng(32))
        errors.append(frobenius_relative_error(fit(data, TrainingConfig("full_mle", seed=2)).model, truth))
    assert errors[1] <= 1.1 * errors[0] and errors[2] <= 1.1 * errors[1], errors


def test_factorized_competitive_at_zero_epistasis(benchmark_sweep):
    fact, full = benchmark_sweep[(0.0, "factorized")], benchmark_sweep[(0.0, "full_mle")]
    noise = max(fact.std(ddof=1), full.std(ddof=1))
    assert fact.mean() <= full.mean() + noise, (fact, full)


# -- assembly -------------------------------------------------------------------------------


def test_assemble_context_free_is_kronecker_sum(codons):
    mats = draw_site_matrices(codons, 6)
    model = FactorizedModel.context_free(codons, mats)
    assert np.allclose(assemble_full_from_factorized(model).dense(), kronecker_sum(mats, codons).dense(),
                       atol=1e-15)


def test_assemble_round_trip(codons):
    model = FactorizedModel.tabular(codons, np.random.default_rng(7).normal(size=(64, 3, 4, 4)))
    q = assemble_full_from_factorized(model)
    FullGenerator(codons, q.dense())
    for x in list(codons)[::4]:
        own = model.site_rates(x.index)
        for l, m in enumerate(match_rows_to_truth(q, x)):
            a = x.symbols[l]
            assert np.allclose(m.rates[a], own[l, a], rtol=1e-14, atol=1e-15)
