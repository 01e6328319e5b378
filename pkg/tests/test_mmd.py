"""Loss tests: double-loop kernel oracle, closed-form values, the
feature-matching formula and finite-difference oracles, and the Adam
moving-average recurrence for the real-moment bank."""

import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from sltgen.mmd import (
    KernelSpec,
    MIXTURE_SCALES,
    MomentBank,
    feature_matching_loss,
    kernel_mmd_loss,
    median_pairwise_distance,
    mixture_kernel_from_data,
    mmd2_kernel,
    update_real_moments,
)
from sltgen.optim import AdamState, adam_step
from sltgen.tensor import Tensor, finite_difference_gradient


def mmd2_double_loop(real, fake, bandwidths):
    """Independent O(N^2 d) oracle, deliberately scalar loops."""
    n, m = len(real), len(fake)
    total = 0.0
    for bw in bandwidths:
        kernel = lambda x, y: math.exp(-float(((x - y) ** 2).sum()) / (2 * bw * bw))
        rr = sum(kernel(real[i], real[j]) for i in range(n) for j in range(n))
        ff = sum(kernel(fake[i], fake[j]) for i in range(m) for j in range(m))
        rf = sum(kernel(real[i], fake[j]) for i in range(n) for j in range(m))
        total += rr / n**2 + ff / m**2 - 2 * rf / (n * m)
    return total


def feature_matching_direct(mu_r, sigma_r, batch):
    """Direct formula evaluation with population std."""
    mu_f = batch.mean(axis=0)
    sigma_f = batch.std(axis=0)
    return float(((mu_r - mu_f) ** 2).sum() + ((sigma_r - sigma_f) ** 2).sum())


# -- kernel statistic --------------------------------------------------------


def test_mmd2_identical_sets_is_zero():
    x = np.random.default_rng(0).standard_normal((10, 3))
    assert mmd2_kernel(x, x.copy(), KernelSpec("rbf", (1.3,))) < 1e-12


def test_mmd2_closed_form_two_singletons():
    value = mmd2_kernel(np.array([[0.0]]), np.array([[1.0]]), KernelSpec("rbf", (1.0,)))
    assert value == pytest.approx(2.0 - 2.0 * math.exp(-0.5), abs=1e-9)


def test_mmd2_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    real = rng.standard_normal((5, 3))
    fake = rng.standard_normal((7, 3)) + 0.3
    for bws in [(1.0,), (0.5, 1.0, 2.0)]:
        got = mmd2_kernel(real, fake, KernelSpec("rbf_mixture", bws))
        assert got == pytest.approx(mmd2_double_loop(real, fake, bws), abs=1e-12)


def test_mmd2_symmetry():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((6, 2)), rng.standard_normal((9, 2))
    kernel = KernelSpec("rbf_mixture", (0.7, 1.9))
    assert mmd2_kernel(x, y, kernel) == pytest.approx(mmd2_kernel(y, x, kernel), abs=1e-12)


def test_mmd2_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        mmd2_kernel(np.zeros((3, 2)), np.zeros((3, 4)), KernelSpec("rbf", (1.0,)))


def test_kernel_spec_validation():
    with pytest.raises(ValueError):
        KernelSpec("rbf", ())
    with pytest.raises(ValueError):
        KernelSpec("rbf", (1.0, 2.0))
    with pytest.raises(ValueError):
        KernelSpec("rbf_mixture", (1.0, -2.0))
    with pytest.raises(ValueError):
        KernelSpec("laplace", (1.0,))


def test_median_heuristic_mixture():
    x = np.array([[0.0], [1.0], [10.0]])
    # pairwise distances 1, 9, 10 -> median 9
    assert median_pairwise_distance(x) == pytest.approx(9.0)
    kernel = mixture_kernel_from_data(x)
    assert kernel.bandwidths == tuple(s * 9.0 for s in MIXTURE_SCALES)


# -- feature matching ---------------------------------------------------------


def bank_with(mu, sigma):
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    bank = MomentBank(tap_widths=[mu.size])
    bank.mu[0][:] = mu
    bank.sigma[0][:] = sigma
    return bank


def test_feature_matching_zero_on_matching_moments():
    bank = bank_with([0.0], [1.0])
    loss = feature_matching_loss(bank, [Tensor(np.array([[-1.0], [1.0]]))])
    assert float(loss.data) == pytest.approx(0.0, abs=1e-15)


def test_feature_matching_unit_loss_on_collapsed_batch():
    bank = bank_with([0.0], [1.0])
    loss = feature_matching_loss(bank, [Tensor(np.array([[0.0], [0.0]]))])
    assert float(loss.data) == pytest.approx(1.0, abs=1e-15)


def test_feature_matching_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(5):
        width = int(rng.integers(1, 6))
        mu_r, sigma_r = rng.standard_normal(width), np.abs(rng.standard_normal(width))
        bank = bank_with(mu_r, sigma_r)
        batch = rng.standard_normal((7, width))
        got = float(feature_matching_loss(bank, [Tensor(batch)]).data)
        assert got == pytest.approx(feature_matching_direct(mu_r, sigma_r, batch),
                                    abs=1e-12)


def test_feature_matching_sums_over_taps():
    rng = np.random.default_rng(4)
    bank = MomentBank(tap_widths=[2, 3])
    bank.mu[0][:] = rng.standard_normal(2)
    bank.sigma[0][:] = np.abs(rng.standard_normal(2))
    bank.mu[1][:] = rng.standard_normal(3)
    bank.sigma[1][:] = np.abs(rng.standard_normal(3))
    t0, t1 = rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
    got = float(feature_matching_loss(bank, [Tensor(t0), Tensor(t1)]).data)
    want = (feature_matching_direct(bank.mu[0], bank.sigma[0], t0)
            + feature_matching_direct(bank.mu[1], bank.sigma[1], t1))
    assert got == pytest.approx(want, abs=1e-12)


def test_feature_matching_gradient_matches_fd():
    rng = np.random.default_rng(5)
    bank = bank_with(rng.standard_normal(3), np.abs(rng.standard_normal(3)) + 0.5)
    batch0 = rng.standard_normal((5, 3))

    tap = Tensor(batch0, requires_grad=True)
    feature_matching_loss(bank, [tap]).backward()
    numeric = finite_difference_gradient(
        lambda b: float(feature_matching_loss(bank, [Tensor(b)]).data), batch0)
    np.testing.assert_allclose(tap.grad, numeric, rtol=1e-4, atol=1e-8)


def test_feature_matching_rejects_batch_of_one():
    bank = bank_with([0.0], [1.0])
    with pytest.raises(ValueError):
        feature_matching_loss(bank, [Tensor(np.array([[0.0]]))])


def test_feature_matching_rejects_tap_mismatch():
    bank = MomentBank(tap_widths=[2, 3])
    with pytest.raises(ValueError):
        feature_matching_loss(bank, [Tensor(np.zeros((4, 2)))])
    with pytest.raises(ValueError):
        feature_matching_loss(bank, [Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 4)))])


# -- differentiable kernel loss ----------------------------------------------


def test_kernel_loss_value_matches_statistic():
    rng = np.random.default_rng(6)
    real = rng.standard_normal((6, 2))
    fake = rng.standard_normal((5, 2)) + 0.2
    bws = (0.5, 1.0, 2.0)
    loss = kernel_mmd_loss(real, [Tensor(fake)], bws)
    assert float(loss.data) == pytest.approx(
        mmd2_kernel(real, fake, KernelSpec("rbf_mixture", bws)), abs=1e-12)


def test_kernel_loss_gradient_matches_fd():
    rng = np.random.default_rng(7)
    real = rng.standard_normal((6, 3))
    fake0 = rng.standard_normal((4, 3)) + 0.1
    bws = (0.7, 1.5)

    tap = Tensor(fake0, requires_grad=True)
    kernel_mmd_loss(real, [tap], bws).backward()
    numeric = finite_difference_gradient(
        lambda f: float(kernel_mmd_loss(real, [Tensor(f)], bws).data), fake0)
    np.testing.assert_allclose(tap.grad, numeric, rtol=1e-4, atol=1e-8)


def test_kernel_loss_routes_gradients_to_multiple_taps():
    rng = np.random.default_rng(8)
    real = rng.standard_normal((6, 5))
    a0, b0 = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    a, b = Tensor(a0, requires_grad=True), Tensor(b0, requires_grad=True)
    kernel_mmd_loss(real, [a, b], (1.0,)).backward()

    def loss_of(a_arr, b_arr):
        concat = np.concatenate([a_arr, b_arr], axis=1)
        return mmd2_double_loop(real, concat, (1.0,))

    numeric_a = finite_difference_gradient(lambda arr: loss_of(arr, b0), a0)
    numeric_b = finite_difference_gradient(lambda arr: loss_of(a0, arr), b0)
    np.testing.assert_allclose(a.grad, numeric_a, rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(b.grad, numeric_b, rtol=1e-4, atol=1e-8)


# -- moment bank ---------------------------------------------------------------


def test_bank_no_op_when_batch_matches_estimate():
    bank = bank_with([2.0], [3.0])
    batch = np.array([[-1.0], [5.0]])  # mean 2, population std 3
    update_real_moments(bank, [batch])
    assert bank.mu[0][0] == pytest.approx(2.0)
    assert bank.sigma[0][0] == pytest.approx(3.0)


def test_bank_first_step_is_lr_sized():
    bank = MomentBank(tap_widths=[1])
    update_real_moments(bank, [np.array([[1.0], [1.0]])])
    # pseudo-gradient on mu is 0 - 1 = -1; bias-corrected first Adam step
    # moves by +ema_lr up to the epsilon correction
    assert abs(bank.mu[0][0] - 1e-3) < 1e-9
    assert bank.sigma[0][0] == pytest.approx(0.0)


def test_bank_converges_to_constant_moment():
    bank = MomentBank(tap_widths=[1])
    batch = np.array([[0.0], [2.0]])  # mean 1, population std 1
    for _ in range(10**4):
        update_real_moments(bank, [batch])
    assert abs(bank.mu[0][0] - 1.0) < 1e-3
    assert abs(bank.sigma[0][0] - 1.0) < 1e-3


def test_bank_matches_scalar_adam_recurrence():
    # Same update, written as the plain Adam recurrence on p with g = p - c.
    bank = MomentBank(tap_widths=[1])
    batch = np.array([[3.0], [3.0]])  # mean 3, population std 0
    p = np.zeros(1)
    state = AdamState.zeros(1, beta1=bank.beta1, beta2=bank.beta2)
    for _ in range(50):
        update_real_moments(bank, [batch])
        adam_step(state, p, p - 3.0, bank.ema_lr)
    assert bank.mu[0][0] == pytest.approx(p[0], abs=1e-15)


def test_bank_warm_start_sets_batch_moments():
    bank = MomentBank(tap_widths=[2])
    batch = np.array([[0.0, 4.0], [2.0, 8.0]])
    bank.warm_start([batch])
    np.testing.assert_allclose(bank.mu[0], [1.0, 6.0])
    np.testing.assert_allclose(bank.sigma[0], [1.0, 2.0])
    assert bank.step_counts() == [0]


def test_bank_state_round_trip():
    rng = np.random.default_rng(9)
    bank = MomentBank(tap_widths=[2, 3])
    for _ in range(5):
        update_real_moments(bank, [rng.standard_normal((4, 2)),
                                   rng.standard_normal((4, 3))])
    stored = {k: v.copy() for k, v in bank.state_tensors().items()}
    counts = list(bank.step_counts())

    other = MomentBank(tap_widths=[2, 3])
    other.load_state(stored, counts)
    batch = [rng.standard_normal((4, 2)), rng.standard_normal((4, 3))]
    update_real_moments(bank, batch)
    update_real_moments(other, batch)
    for j in range(2):
        np.testing.assert_array_equal(bank.mu[j], other.mu[j])
        np.testing.assert_array_equal(bank.sigma[j], other.sigma[j])


def test_bank_rejects_wrong_widths():
    bank = MomentBank(tap_widths=[2])
    with pytest.raises(ValueError):
        update_real_moments(bank, [np.zeros((4, 3))])
    with pytest.raises(ValueError):
        update_real_moments(bank, [np.zeros((4, 2)), np.zeros((4, 2))])


# -- the two losses agree on direction -----------------------------------------


def test_losses_rank_mean_offsets_consistently():
    # Identity features, big gaussian samples: as the fake mean moves away
    # from the real mean, both losses should grow essentially monotonically.
    rng = np.random.default_rng(10)
    real = rng.standard_normal((512, 2))
    bank = MomentBank(tap_widths=[2])
    bank.warm_start([real])
    kernel = mixture_kernel_from_data(real)

    offsets = np.linspace(0.0, 3.0, 13)
    fm, km = [], []
    base = rng.standard_normal((512, 2))
    for off in offsets:
        fake = base + np.array([off, 0.0])
        fm.append(float(feature_matching_loss(bank, [Tensor(fake)]).data))
        km.append(mmd2_kernel(real, fake, kernel))
    rho = spearmanr(fm, km).statistic
    assert rho > 0.9
