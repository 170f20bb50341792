import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zofed.errors import CapabilityError, ConfigError, ProtocolError
from zofed.estimator import (
    EstimatorConfig,
    PerturbationStream,
    covariance_diagnostics,
    estimate,
    estimate_gradient,
    frobenius_deviation_streamed,
    loss_diff_central,
    loss_diff_forward,
    loss_diffs,
    sample_perturbation,
    spectral_norm_sym,
    twice_fd,
)
from zofed.nn import Batch, Dense, ModelSpec, forward_loss


def test_config_defaults_and_validation():
    cfg = EstimatorConfig()
    assert cfg.sigma == 1e-4 and cfg.scheme == "central"
    with pytest.raises(ConfigError, match="sigma must be > 0"):
        EstimatorConfig(sigma=0.0)
    with pytest.raises(ConfigError):
        EstimatorConfig(k=0)
    with pytest.raises(ConfigError):
        EstimatorConfig(scheme="backward")
    assert EstimatorConfig(sigma=0.5).coefficient == pytest.approx(2.0)
    assert EstimatorConfig(sigma=0.5, scheme="forward").coefficient == pytest.approx(4.0)


def test_twice_fd_matches_forward_budget():
    central = EstimatorConfig(k=50)
    t = twice_fd(central)
    assert t.scheme == "forward" and t.k == 100
    # one shared baseline per batch on top of the 2K perturbed forwards
    assert t.forwards_per_batch == central.forwards_per_batch + 1


# -- perturbations ---------------------------------------------------------------------------


@given(st.integers(0, 2**63), st.integers(0, 1000), st.integers(0, 50))
@settings(max_examples=25, deadline=None)
def test_perturbation_is_pure_function(seed, round_, k):
    a = PerturbationStream(seed, round_, 0.1, 17).delta(k)
    b = PerturbationStream(seed, round_, 0.1, 17).delta(k)
    assert np.array_equal(a, b)
    assert np.array_equal(sample_perturbation(PerturbationStream(seed, round_, 0.1, 17), k), a)


def test_block_rows_equal_single_draws():
    s = PerturbationStream(3, 4, 0.01, 9)
    block = s.block(2, 7)
    for row, k in enumerate(range(2, 7)):
        assert np.array_equal(block[row], s.delta(k))
    assert not np.array_equal(s.delta(0), s.delta(1))
    assert not np.array_equal(s.delta(0), PerturbationStream(3, 5, 0.01, 9).delta(0))


def test_large_vector_marginal_statistics():
    sigma, n = 1e-4, 10_000
    d = PerturbationStream(8, 0, sigma, n).delta(0)
    assert abs(d.mean()) < 4 * sigma / np.sqrt(n)
    assert d.std() == pytest.approx(sigma, rel=0.05)


def test_squared_norm_follows_chi_square_mean():
    sigma, n = 0.3, 100
    s = PerturbationStream(12, 0, sigma, n)
    vals = (s.block(0, 1000) ** 2).sum(axis=1) / sigma**2
    assert vals.mean() == pytest.approx(n, rel=0.05)


# -- loss differences ------------------------------------------------------------------------


def test_central_difference_zero_delta_and_antisymmetry(small_mlp):
    spec, params, batch = small_mlp
    assert loss_diff_central(spec, params, np.zeros_like(params), batch) == 0.0
    d = PerturbationStream(0, 0, 1e-3, params.size).delta(0)
    a = loss_diff_central(spec, params, d, batch)
    assert a + loss_diff_central(spec, params, -d, batch) == 0.0
    assert a == forward_loss(spec, params + d, batch) - forward_loss(spec, params - d, batch)


def test_forward_difference(small_mlp):
    spec, params, batch = small_mlp
    base = forward_loss(spec, params, batch)
    assert loss_diff_forward(spec, params, np.zeros_like(params), batch, base) == 0.0
    d = PerturbationStream(0, 0, 1e-3, params.size).delta(2)
    assert loss_diff_forward(spec, params, d, batch, base) == forward_loss(spec, params + d, batch) - base


def test_forward_difference_of_linear_model_is_exact():
    # logits are linear in w; with two classes and label 0, L = softplus(z1 - z0)
    spec = ModelSpec((Dense(3, 2, bias=False),), (3,), 2)
    x = np.array([[0.5, -1.0, 2.0]])
    batch = Batch(x, np.array([0]))
    w = np.zeros(6)
    d = np.array([1e-3, 0, 0, 0, 0, 0])  # moves only the class-0 logit by 1e-3 * x0
    base = forward_loss(spec, w, batch)
    got = loss_diff_forward(spec, w, d, batch, base)
    assert got == pytest.approx(np.log1p(np.exp(-0.5e-3)) - np.log(2), rel=1e-9)


@pytest.mark.parametrize("scheme", ["central", "forward"])
def test_batched_differences_match_pointwise(small_mlp, scheme):
    spec, params, batch = small_mlp
    cfg = EstimatorConfig(sigma=1e-3, k=11, scheme=scheme, chunk=4)
    s = PerturbationStream(5, 1, cfg.sigma, params.size)
    got = loss_diffs(spec, params, s, cfg, batch)
    base = forward_loss(spec, params, batch)
    for k in range(cfg.k):
        d = s.delta(k)
        ref = loss_diff_central(spec, params, d, batch) if scheme == "central" else loss_diff_forward(spec, params, d, batch, base)
        assert got[k] == pytest.approx(ref, rel=1e-12, abs=1e-18)


def test_dimension_mismatch_is_protocol_error(small_mlp):
    spec, params, batch = small_mlp
    with pytest.raises(ProtocolError):
        loss_diffs(spec, params, PerturbationStream(0, 0, 1e-3, params.size + 1), EstimatorConfig(k=2), batch)


# -- gradient assembly -----------------------------------------------------------------------


def test_zero_diffs_give_zero_gradient():
    cfg = EstimatorConfig(k=8)
    g = estimate_gradient(np.zeros(8), PerturbationStream(0, 0, 1e-4, 5), cfg)
    assert np.array_equal(g, np.zeros(5))


def test_k_mismatch_is_protocol_error():
    with pytest.raises(ProtocolError):
        estimate_gradient(np.zeros(7), PerturbationStream(0, 0, 1e-4, 5), EstimatorConfig(k=8))


def test_quadratic_expectation():
    # L(w) = w^2 at w = 3: central difference is 4 w delta; estimate is 6 * sum(delta^2) / (K sigma^2)
    sigma, k, w = 1e-4, 20_000, 3.0
    cfg = EstimatorConfig(sigma=sigma, k=k, chunk=4096)
    s = PerturbationStream(1, 0, sigma, 1)
    d = s.block(0, k)[:, 0]
    g = estimate_gradient(4 * w * d, s, cfg)
    assert g[0] == pytest.approx(6.0 * (d**2).sum() / (k * sigma**2), rel=1e-12)
    assert g[0] == pytest.approx(6.0, rel=4 * np.sqrt(2 / k))


@pytest.mark.parametrize("scheme", ["central", "forward"])
def test_linear_loss_gives_sigma_hat_times_gradient(scheme):
    n, k, sigma = 12, 40, 1e-3
    g_true = np.random.default_rng(0).normal(size=n)
    s = PerturbationStream(4, 2, sigma, n)
    d = s.block(0, k)
    diffs = 2 * d @ g_true if scheme == "central" else d @ g_true
    g = estimate_gradient(diffs, s, EstimatorConfig(sigma=sigma, k=k, scheme=scheme, chunk=7))
    sigma_hat = covariance_diagnostics(s, k).sigma_hat
    np.testing.assert_allclose(g, sigma_hat @ g_true, rtol=1e-10, atol=1e-12)


def test_estimate_is_deterministic_across_chunking(small_mlp):
    spec, params, batch = small_mlp
    s = PerturbationStream(9, 3, 1e-4, params.size)
    a = estimate(spec, params, s, EstimatorConfig(k=30, chunk=64), batch)
    b = estimate(spec, params, s, EstimatorConfig(k=30, chunk=64), batch)
    c = estimate(spec, params, s, EstimatorConfig(k=30, chunk=7), batch)
    assert np.array_equal(a, b)
    np.testing.assert_allclose(a, c, rtol=1e-9)


# -- covariance diagnostics ------------------------------------------------------------------


def test_covariance_invariants():
    diag = covariance_diagnostics(PerturbationStream(0, 0, 0.2, 15), 30)
    assert np.array_equal(diag.sigma_hat, diag.sigma_hat.T)
    assert np.linalg.eigvalsh(diag.sigma_hat).min() > -1e-12
    assert diag.frob_dev >= diag.spec_dev >= 0
    ref = np.abs(np.linalg.eigvalsh(diag.sigma_hat - np.eye(15))).max()
    assert diag.spec_dev == pytest.approx(ref, rel=1e-6)


def test_covariance_large_k():
    diag = covariance_diagnostics(PerturbationStream(1, 0, 1e-4, 10), 100_000, chunk=4096)
    assert diag.frob_dev < 0.05
    assert np.abs(diag.delta_hat).max() < 4e-4 / np.sqrt(100_000) * 4


def test_covariance_single_sample_is_chi_square_one():
    vals = [covariance_diagnostics(PerturbationStream(t, 0, 1e-4, 1), 1).sigma_hat[0, 0] for t in range(4000)]
    assert np.mean(vals) == pytest.approx(1.0, abs=4 * np.sqrt(2 / 4000))


def test_covariance_capability_guard_and_streamed_frobenius():
    s = PerturbationStream(2, 0, 0.5, 40)
    with pytest.raises(CapabilityError):
        covariance_diagnostics(s, 10, max_dim=20)
    assert frobenius_deviation_streamed(s, 25, chunk=6) == pytest.approx(covariance_diagnostics(s, 25).frob_dev, rel=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_power_iteration_matches_eigvalsh(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    a = a + a.T
    assert spectral_norm_sym(a) == pytest.approx(np.abs(np.linalg.eigvalsh(a)).max(), rel=1e-5)
