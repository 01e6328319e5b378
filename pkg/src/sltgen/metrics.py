"""Distribution metrics over extractor features.

All metrics take plain (N, d) feature matrices with Euclidean geometry.
The k-NN manifold metrics use closed balls whose radius is the distance
to the k-th nearest neighbour within the same set, self excluded:

* precision: fraction of fake points inside some real ball
* recall:    fraction of real points inside some fake ball
* density:   (1 / kM) sum over (real ball, fake point) containments
* coverage:  fraction of real balls containing at least one fake point

The Frechet distance fits Gaussians (sample covariance, 1/(N-1)) and
computes |mu1 - mu2|^2 + Tr(C1 + C2 - 2 (C1 C2)^(1/2)).  The matrix
square root goes through a symmetric eigendecomposition with negative
eigenvalues clamped to zero, which keeps the result real and
deterministic without iterative solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial.distance import cdist

from .mmd import KernelSpec, mmd2_kernel
from .tensor import Tensor


@dataclass(frozen=True)
class FeatureSet:
    """Feature matrix plus provenance tag ("real" or "fake")."""

    features: np.ndarray
    source: str

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError(f"FeatureSet: expected (N, d), got {feats.shape}")
        object.__setattr__(self, "features", feats)


@dataclass(frozen=True)
class MetricsReport:
    fd: float
    precision: float
    recall: float
    density: float
    coverage: float
    mmd2_eval: float
    n_real: int
    n_fake: int
    knn_k: int

    def as_dict(self) -> dict:
        return asdict(self)


def _features(name: str, x) -> np.ndarray:
    if isinstance(x, FeatureSet):
        x = x.features
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"{name}: expected a non-empty (N, d) matrix, got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError(f"{name}: features contain non-finite values")
    return x


def _gaussian_fit(x: np.ndarray):
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (x.shape[0] - 1)
    return mu, cov


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(real, fake) -> float:
    """Frechet distance between Gaussian fits of two feature sets."""
    real = _features("frechet_distance: real", real)
    fake = _features("frechet_distance: fake", fake)
    if real.shape[1] != fake.shape[1]:
        raise ValueError("frechet_distance: feature dimensions differ")
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise ValueError("frechet_distance: need at least 2 samples per set")
    mu1, cov1 = _gaussian_fit(real)
    mu2, cov2 = _gaussian_fit(fake)
    s2 = _psd_sqrt(cov2)
    inner = s2 @ cov1 @ s2
    inner = (inner + inner.T) / 2.0  # symmetrize before the eigensolve
    vals = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    trace_sqrt = np.sqrt(vals).sum()
    dist = float(((mu1 - mu2) ** 2).sum()
                 + np.trace(cov1) + np.trace(cov2) - 2.0 * trace_sqrt)
    return max(dist, 0.0)


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbour in the same set."""
    dists = cdist(x, x, "euclidean")
    np.fill_diagonal(dists, np.inf)  # self excluded
    return np.partition(dists, k - 1, axis=1)[:, k - 1]


def precision_recall(real, fake, k: int = 3) -> tuple[float, float]:
    """Manifold precision and recall with k-NN balls (closed, <=)."""
    real = _features("precision_recall: real", real)
    fake = _features("precision_recall: fake", fake)
    if real.shape[1] != fake.shape[1]:
        raise ValueError("precision_recall: feature dimensions differ")
    if k < 1:
        raise ValueError("precision_recall: k must be >= 1")
    if real.shape[0] < k + 1 or fake.shape[0] < k + 1:
        raise ValueError(f"precision_recall: each set needs at least {k + 1} samples")
    radii_real = _knn_radii(real, k)
    radii_fake = _knn_radii(fake, k)
    d_rf = cdist(real, fake, "euclidean")
    precision = float((d_rf <= radii_real[:, None]).any(axis=0).mean())
    recall = float((d_rf <= radii_fake[None, :]).any(axis=1).mean())
    return precision, recall


def density_coverage(real, fake, k: int = 3) -> tuple[float, float]:
    """Density (ball-count average, may exceed 1) and coverage."""
    real = _features("density_coverage: real", real)
    fake = _features("density_coverage: fake", fake)
    if real.shape[1] != fake.shape[1]:
        raise ValueError("density_coverage: feature dimensions differ")
    if k < 1:
        raise ValueError("density_coverage: k must be >= 1")
    if real.shape[0] < k + 1:
        raise ValueError(f"density_coverage: real set needs at least {k + 1} samples")
    radii_real = _knn_radii(real, k)
    inside = cdist(real, fake, "euclidean") <= radii_real[:, None]
    density = float(inside.sum() / (k * fake.shape[0]))
    coverage = float(inside.any(axis=1).mean())
    return density, coverage


def generate_array(generator, n_samples: int, latent_rng: np.random.Generator,
                   batch_size: int = 64) -> np.ndarray:
    """Draw latents and forward the generator in fixed-size chunks.

    Chunking is part of the definition for batchnorm generators: batch
    statistics see `batch_size` samples at a time, so the same seed and
    chunk size reproduce identical samples.
    """
    outputs = []
    done = 0
    while done < n_samples:
        take = min(batch_size, n_samples - done)
        z = latent_rng.standard_normal((take, generator.spec.latent_dim))
        out, _ = generator.forward(z, record=False)
        outputs.append(out.data)
        done += take
    return np.concatenate(outputs, axis=0)


def evaluate(generator, extractor, real_samples: np.ndarray, *,
             n_samples: int, latent_seed: int, knn_k: int = 3,
             kernel: KernelSpec | None = None, batch_size: int = 64) -> MetricsReport:
    """Full metric sweep of a (masked) generator against real samples.

    Draws `n_samples` latents from `latent_seed`, generates, extracts
    features for both sides with the frozen extractor, and reports
    Frechet distance, precision/recall, density/coverage and the kernel
    MMD^2.  Deterministic for fixed inputs and seed.
    """
    from .mmd import mixture_kernel_from_data

    real_samples = np.asarray(real_samples, dtype=np.float64)
    latent_rng = np.random.default_rng(np.random.SeedSequence(latent_seed))
    fake_samples = generate_array(generator, n_samples, latent_rng, batch_size)

    real_feats = _concat_taps(extractor.extract(real_samples))
    fake_feats = _concat_taps(extractor.extract(fake_samples))
    if kernel is None:
        kernel = mixture_kernel_from_data(real_feats)

    precision, recall = precision_recall(real_feats, fake_feats, knn_k)
    density, coverage = density_coverage(real_feats, fake_feats, knn_k)
    return MetricsReport(
        fd=frechet_distance(real_feats, fake_feats),
        precision=precision,
        recall=recall,
        density=density,
        coverage=coverage,
        mmd2_eval=mmd2_kernel(real_feats, fake_feats, kernel),
        n_real=real_feats.shape[0],
        n_fake=fake_feats.shape[0],
        knn_k=knn_k,
    )


def _concat_taps(taps: list[Tensor]) -> np.ndarray:
    arrays = [t.data for t in taps]
    return arrays[0] if len(arrays) == 1 else np.concatenate(arrays, axis=1)
