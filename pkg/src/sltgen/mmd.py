"""Moment-matching losses between real and generated samples.

Two interchangeable forms:

* `mmd2_kernel`: the biased kernel two-sample statistic
  (1/N^2) sum k(r, r') - (2/NM) sum k(r, f) + (1/M^2) sum k(f, f'),
  with RBF kernels k(x, y) = exp(-|x - y|^2 / (2 sigma^2)), optionally a
  sum over a bandwidth mixture.  Used as the evaluation statistic and,
  via `kernel_mmd_loss`, as a differentiable training loss.

* `feature_matching_loss`: squared distance between per-feature means
  and standard deviations of extractor taps,
  sum_j |mu_r_j - mu_f_j|^2 + |sigma_r_j - sigma_f_j|^2, with sigma the
  population (1/N) standard deviation.

The real-side moments are not recomputed from scratch: a `MomentBank`
keeps running estimates, updated each step by an Adam-style rule whose
pseudo-gradient is (estimate - batch moment).  The tiny beta1 makes the
update nearly sign-like, so the estimates track the stream at a bounded
rate regardless of gradient scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .optim import AdamState, adam_step
from .tensor import Tensor, mean, sqrt, square, sub, sum_


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel family: `rbf` takes one bandwidth, `rbf_mixture` sums several."""

    kind: str = "rbf_mixture"
    bandwidths: tuple = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "bandwidths",
                           tuple(float(b) for b in self.bandwidths))
        if self.kind not in ("rbf", "rbf_mixture"):
            raise ValueError(f"KernelSpec: unknown kind {self.kind!r}")
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ValueError("KernelSpec: bandwidths must be positive")
        if self.kind == "rbf" and len(self.bandwidths) != 1:
            raise ValueError("KernelSpec: rbf takes exactly one bandwidth")


def _check_feature_matrix(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{name}: expected a non-empty (N, d) matrix, got shape {x.shape}")
    return x


def mmd2_kernel(real: np.ndarray, fake: np.ndarray, kernel: KernelSpec) -> float:
    """Biased squared-MMD estimate; non-negative up to a clamped 1e-12 floor."""
    real = _check_feature_matrix("mmd2_kernel: real", real)
    fake = _check_feature_matrix("mmd2_kernel: fake", fake)
    if real.shape[1] != fake.shape[1]:
        raise ValueError(
            f"mmd2_kernel: dimension mismatch {real.shape[1]} vs {fake.shape[1]}")
    d_rr = cdist(real, real, "sqeuclidean")
    d_ff = cdist(fake, fake, "sqeuclidean")
    d_rf = cdist(real, fake, "sqeuclidean")
    n, m = real.shape[0], fake.shape[0]
    total = 0.0
    for bw in kernel.bandwidths:
        denom = 2.0 * bw * bw
        total += (np.exp(-d_rr / denom).sum() / (n * n)
                  + np.exp(-d_ff / denom).sum() / (m * m)
                  - 2.0 * np.exp(-d_rf / denom).sum() / (n * m))
    return max(float(total), 0.0)


def median_pairwise_distance(x: np.ndarray) -> float:
    """Median Euclidean distance over distinct pairs."""
    x = _check_feature_matrix("median_pairwise_distance", x)
    if x.shape[0] < 2:
        raise ValueError("median_pairwise_distance: need at least 2 points")
    dists = cdist(x, x, "euclidean")
    pairs = dists[np.triu_indices(x.shape[0], k=1)]
    return float(np.median(pairs))


MIXTURE_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


def mixture_kernel_from_data(real: np.ndarray,
                             scales: tuple = MIXTURE_SCALES) -> KernelSpec:
    """Bandwidth mixture scaled by the median heuristic, computed once per run."""
    med = max(median_pairwise_distance(real), 1e-12)
    return KernelSpec(kind="rbf_mixture", bandwidths=tuple(s * med for s in scales))


# -- running real-side moments -------------------------------------------


class MomentBank:
    """Running per-tap mean/std estimates of the real distribution.

    Each estimate vector is nudged toward the incoming batch moment by a
    bias-corrected Adam step on the pseudo-gradient (estimate - batch
    moment).  Standard deviations are clamped at zero after each update.
    """

    def __init__(self, tap_widths, beta1: float = 1e-5, beta2: float = 0.999,
                 ema_lr: float = 1e-3, epsilon: float = 1e-8):
        self.tap_widths = [int(w) for w in tap_widths]
        self.beta1 = beta1
        self.beta2 = beta2
        self.ema_lr = ema_lr
        self.epsilon = epsilon
        self.mu = [np.zeros(w) for w in self.tap_widths]
        self.sigma = [np.zeros(w) for w in self.tap_widths]
        self.mu_state = [AdamState.zeros(w, beta1, beta2, epsilon) for w in self.tap_widths]
        self.sigma_state = [AdamState.zeros(w, beta1, beta2, epsilon)
                            for w in self.tap_widths]

    def _check_taps(self, taps) -> list[np.ndarray]:
        if len(taps) != len(self.tap_widths):
            raise ValueError(
                f"MomentBank: expected {len(self.tap_widths)} taps, got {len(taps)}")
        arrays = []
        for j, tap in enumerate(taps):
            arr = np.asarray(tap, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != self.tap_widths[j]:
                raise ValueError(
                    f"MomentBank: tap {j} must be (N, {self.tap_widths[j]}), got {arr.shape}")
            arrays.append(arr)
        return arrays

    def warm_start(self, real_taps) -> None:
        """Seed the estimates directly from one batch; Adam state untouched."""
        for j, tap in enumerate(self._check_taps(real_taps)):
            self.mu[j][:] = tap.mean(axis=0)
            self.sigma[j][:] = tap.std(axis=0)

    def update_real_moments(self, real_taps) -> None:
        for j, tap in enumerate(self._check_taps(real_taps)):
            batch_mu = tap.mean(axis=0)
            batch_sigma = tap.std(axis=0)  # population, matching the loss
            adam_step(self.mu_state[j], self.mu[j], self.mu[j] - batch_mu, self.ema_lr)
            adam_step(self.sigma_state[j], self.sigma[j],
                      self.sigma[j] - batch_sigma, self.ema_lr)
            np.maximum(self.sigma[j], 0.0, out=self.sigma[j])

    # -- checkpoint plumbing ------------------------------------------------

    def state_tensors(self) -> dict:
        out = {}
        for j in range(len(self.tap_widths)):
            out[f"moments/mu{j}"] = self.mu[j]
            out[f"moments/mu{j}.m"] = self.mu_state[j].m
            out[f"moments/mu{j}.v"] = self.mu_state[j].v
            out[f"moments/sigma{j}"] = self.sigma[j]
            out[f"moments/sigma{j}.m"] = self.sigma_state[j].m
            out[f"moments/sigma{j}.v"] = self.sigma_state[j].v
        return out

    def step_counts(self) -> list[int]:
        return [s.step_count for s in self.mu_state]

    def load_state(self, tensors: dict, step_counts) -> None:
        for j in range(len(self.tap_widths)):
            self.mu[j][:] = tensors[f"moments/mu{j}"]
            self.mu_state[j].m[:] = tensors[f"moments/mu{j}.m"]
            self.mu_state[j].v[:] = tensors[f"moments/mu{j}.v"]
            self.sigma[j][:] = tensors[f"moments/sigma{j}"]
            self.sigma_state[j].m[:] = tensors[f"moments/sigma{j}.m"]
            self.sigma_state[j].v[:] = tensors[f"moments/sigma{j}.v"]
            self.mu_state[j].step_count = int(step_counts[j])
            self.sigma_state[j].step_count = int(step_counts[j])


def update_real_moments(bank: MomentBank, real_taps) -> None:
    """Functional alias for `MomentBank.update_real_moments`."""
    bank.update_real_moments(real_taps)


def feature_matching_loss(bank: MomentBank, fake_taps) -> Tensor:
    """Squared mean/std mismatch against the bank, summed over taps.

    Differentiable in the fake taps.  Needs batch size >= 2: the
    population std of a single sample is identically zero and its
    gradient is unusable.
    """
    if len(fake_taps) != len(bank.tap_widths):
        raise ValueError(
            f"feature_matching_loss: expected {len(bank.tap_widths)} taps, "
            f"got {len(fake_taps)}")
    total = None
    for j, tap in enumerate(fake_taps):
        if not isinstance(tap, Tensor):
            tap = Tensor(tap)
        if tap.data.ndim != 2 or tap.data.shape[1] != bank.tap_widths[j]:
            raise ValueError(
                f"feature_matching_loss: tap {j} must be (N, {bank.tap_widths[j]}), "
                f"got {tap.data.shape}")
        if tap.data.shape[0] < 2:
            raise ValueError("feature_matching_loss: batch size must be >= 2")
        mu_f = mean(tap, axis=0)
        sigma_f = sqrt(mean(square(sub(tap, mu_f)), axis=0))
        term = sum_(square(sub(Tensor(bank.mu[j]), mu_f)))
        term = term + sum_(square(sub(Tensor(bank.sigma[j]), sigma_f)))
        total = term if total is None else total + term
    return total


def kernel_mmd_loss(real_features: np.ndarray, fake_taps, kernel) -> Tensor:
    """Differentiable biased kernel MMD^2 against a fixed real batch.

    `fake_taps` may be a single tensor or a list of tap tensors, which
    are treated as one concatenated feature space.  Implemented as a
    single tape node with the analytic gradient with respect to the fake
    features; the real side is constant.
    """
    if isinstance(kernel, (tuple, list)):
        kernel = KernelSpec(kind="rbf_mixture", bandwidths=tuple(kernel))
    if kernel is None:
        raise ValueError("kernel_mmd_loss: a kernel or bandwidth list is required")
    if isinstance(fake_taps, Tensor):
        fake_taps = [fake_taps]
    real = _check_feature_matrix("kernel_mmd_loss: real", real_features)
    parts = [t.data for t in fake_taps]
    fake = np.concatenate(parts, axis=1) if len(parts) > 1 else parts[0]
    if fake.ndim != 2 or fake.shape[1] != real.shape[1]:
        raise ValueError(
            f"kernel_mmd_loss: fake features {fake.shape} do not match real "
            f"dimension {real.shape[1]}")
    n, m = real.shape[0], fake.shape[0]
    d_rr = cdist(real, real, "sqeuclidean")
    d_ff = cdist(fake, fake, "sqeuclidean")
    d_rf = cdist(real, fake, "sqeuclidean")
    value = 0.0
    grad_fake = np.zeros_like(fake)
    for bw in kernel.bandwidths:
        denom = 2.0 * bw * bw
        k_rr = np.exp(-d_rr / denom)
        k_ff = np.exp(-d_ff / denom)
        k_rf = np.exp(-d_rf / denom)
        value += (k_rr.sum() / (n * n) + k_ff.sum() / (m * m)
                  - 2.0 * k_rf.sum() / (n * m))
        # d/dF of each term; see the kernel derivative k * (x - y) / bw^2.
        ff_part = (k_ff @ fake - k_ff.sum(axis=1)[:, None] * fake) / (m * m)
        rf_part = (k_rf.T @ real - k_rf.sum(axis=0)[:, None] * fake) / (n * m)
        grad_fake += (2.0 / (bw * bw)) * (ff_part - rf_part)

    out = Tensor._from_op(np.asarray(value), tuple(fake_taps), None)

    def backward():
        g = float(out.grad)
        offset = 0
        for tap in fake_taps:
            width = tap.data.shape[1]
            if tap.requires_grad:
                tap._accumulate(g * grad_fake[:, offset:offset + width])
            offset += width

    out._backward = backward if out.requires_grad else None
    return out
