"""Feature extraction, Frechet distance, kNN precision/recall, fake-validation probe.

Every FID within a run must come from one fixed feature extractor (here, the
source-class classifier's penultimate layer); distances are only comparable
under the same extractor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch


class NumericalError(ArithmeticError):
    """Matrix square root ran into eigenvalues below the tolerated floor."""


EIGENVALUE_FLOOR = -1e-6


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, feature_dim) float64
    provenance: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.features)):
            raise ValueError("non-finite feature values")

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.mean)


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    k_nn: int


def extract_features(feature_net, images: np.ndarray, batch_size: int = 256,
                     provenance: str = "") -> FeatureSet:
    """Penultimate-layer activations of a classifier, row-for-row per image."""
    from .models import to_tensor

    feature_net.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            rows.append(feature_net.features(
                to_tensor(images[start:start + batch_size])).double().numpy())
    return FeatureSet(np.concatenate(rows), provenance or getattr(feature_net, "fingerprint", ""))


def fit_gaussian(features: FeatureSet | np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance (divisor N-1), symmetrised."""
    x = features.features if isinstance(features, FeatureSet) else np.asarray(features)
    x = x.astype(np.float64)
    if len(x) < 2:
        raise ValueError(f"need at least 2 rows to fit moments, got {len(x)}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    return GaussianStats(mean=mean, cov=(cov + cov.T) / 2.0)


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() < EIGENVALUE_FLOOR:
        raise NumericalError(f"covariance eigenvalue {vals.min():.3e} below {EIGENVALUE_FLOOR}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses the symmetric eigendecomposition of
    S_a^{1/2} S_b S_a^{1/2}; tiny negative eigenvalues (> -1e-6) are clipped.
    """
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < EIGENVALUE_FLOOR:
        raise NumericalError(f"cross-term eigenvalue {vals.min():.3e} below {EIGENVALUE_FLOOR}")
    trace_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    delta = a.mean - b.mean
    fid = float(delta @ delta + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    return max(fid, 0.0)


def _sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.empty((len(a), len(b)))
    for start in range(0, len(a), chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        out[start:start + chunk] = (diff ** 2).sum(axis=-1)
    return out


def _knn_radii_sq(x: np.ndarray, k_nn: int) -> np.ndarray:
    d = _sq_dists(x, x)
    np.fill_diagonal(d, np.inf)  # self excluded
    return np.partition(d, k_nn - 1, axis=1)[:, k_nn - 1]


def knn_precision_recall(real: FeatureSet, fake: FeatureSet, k_nn: int = 3) -> PrecisionRecall:
    """Manifold precision (fake covered by real balls) and recall (vice versa).

    Each point's ball radius is the distance to its k_nn-th nearest neighbour
    within its own set; membership uses Euclidean distance with <=.
    """
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    xr = real.features.astype(np.float64)
    xf = fake.features.astype(np.float64)
    if len(xr) <= k_nn or len(xf) <= k_nn:
        raise ValueError(f"both sets must have more than k_nn={k_nn} points "
                         f"(got {len(xr)} real, {len(xf)} fake)")
    r_real = _knn_radii_sq(xr, k_nn)
    r_fake = _knn_radii_sq(xf, k_nn)
    cross = _sq_dists(xf, xr)  # (fake, real)
    precision = float((cross <= r_real[None, :]).any(axis=1).mean())
    recall = float((cross.T <= r_fake[None, :]).any(axis=1).mean())
    return PrecisionRecall(precision=precision, recall=recall, k_nn=k_nn)


def warn_if_undersampled(n: int, feature_dim: int):
    if n < 2 * feature_dim:
        warnings.warn(
            f"moment fitting with N={n} < 2 x feature_dim={feature_dim}; "
            "FID estimates will be noisy", stacklevel=2)


def fake_validation_accuracy(classifier, checkpoint, partition, n_per_class: int,
                             sigma: float, seed: int) -> float:
    """Accuracy on a fresh GAN-generated held-out set (n_per_class per target class).

    Use a seed distinct from the one that generated the training images.
    """
    from .classifier import evaluate_accuracy
    from .train_gan import generate_class_samples

    images, head_labels = generate_class_samples(
        checkpoint, n_classes=partition.n_target, n_per_class=n_per_class,
        sigma=sigma, seed=seed)
    return evaluate_accuracy(classifier, (images, head_labels))
