"""FID, KID and a pixel-diversity mode-collapse detector."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import ImageSet
from .features import FeatureSet

EIG_CLAMP = 1e-6
FID_NEGATIVE_TOL = 1e-6
COLLAPSE_THRESHOLD = 0.01


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray = field(repr=False)
    cov: np.ndarray = field(repr=False)
    n: int
    extractor_fingerprint: str | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-8 * max(1.0, float(np.abs(cov).max(initial=0.0)))):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _as_matrix(features) -> tuple[np.ndarray, str | None]:
    if isinstance(features, FeatureSet):
        return features.vectors.astype(np.float64), features.extractor_fingerprint
    return np.atleast_2d(np.asarray(features, dtype=np.float64)), None


def compute_stats(features: FeatureSet | np.ndarray) -> FeatureStats:
    """Mean and unbiased (N-1) covariance, symmetrised."""
    x, fp = _as_matrix(features)
    n = len(x)
    if n < 2:
        raise ValueError(f"insufficient samples: covariance needs N >= 2, got {n}")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean, cov, n, fp)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = _clamp_eigs(vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _clamp_eigs(vals: np.ndarray) -> np.ndarray:
    tol = EIG_CLAMP * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.size and vals.min() < -tol:
        raise FloatingPointError(f"fid: sqrtm failed (eigenvalue {vals.min():.3e} below -{tol:.1e})")
    return np.clip(vals, 0.0, None)


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    """Tr((a b)^1/2) for PSD a and b.

    The eigenvalues of a^1/2 b a^1/2 are the squared singular values of
    a^1/2 b^1/2, so the trace is their sum. Taking singular values directly
    avoids square-rooting round-off in near-zero eigenvalues.
    """
    m = _psd_sqrt(a) @ _psd_sqrt(b)
    return float(np.linalg.svd(m, compute_uv=False).sum())


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between the Gaussian fits ``a`` and ``b``.

    The cross term is evaluated in both orders and averaged so the result is
    exactly symmetric.
    """
    if a.dim != b.dim:
        raise ValueError(f"incompatible stats: dimension {a.dim} vs {b.dim}")
    if a.extractor_fingerprint and b.extractor_fingerprint and a.extractor_fingerprint != b.extractor_fingerprint:
        raise ValueError("incompatible stats: features come from different extractors")
    diff = a.mean - b.mean
    tr_cross = 0.5 * (_trace_sqrt_product(a.cov, b.cov) + _trace_sqrt_product(b.cov, a.cov))
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_cross
    if value < 0.0:
        if value < -FID_NEGATIVE_TOL:
            raise FloatingPointError(f"fid: sqrtm failed (negative distance {value:.3e})")
        value = 0.0
    return value


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """k(u, v) = (u.v / d + 1)^3."""
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2(x: np.ndarray, y: np.ndarray, estimator: str = "unbiased") -> float:
    """Squared MMD between two samples under :func:`polynomial_kernel`."""
    m, n = len(x), len(y)
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    if estimator == "biased":
        return float(kxx.sum() / (m * m) + kyy.sum() / (n * n) - 2.0 * kxy.sum() / (m * n))
    if estimator != "unbiased":
        raise ValueError(f"unknown KID estimator {estimator!r}")
    if m < 2 or n < 2:
        raise ValueError("unbiased KID needs at least 2 samples per side")
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.sum() / (m * n))


def kid(
    f_real: FeatureSet | np.ndarray,
    f_fake: FeatureSet | np.ndarray,
    estimator: str = "unbiased",
    subset_size: int = 100,
    n_subsets: int = 100,
    seed: int = 0,
) -> float:
    """Average squared MMD over ``n_subsets`` seeded subsamples of ``subset_size``.

    Subsets are drawn without replacement. A subset equal to a whole side uses
    that side as-is, so ``subset_size == N`` and ``n_subsets == 1`` is the plain
    full-set estimate.
    """
    if isinstance(f_real, FeatureSet) and isinstance(f_fake, FeatureSet):
        f_real.check_comparable(f_fake)
    x, _ = _as_matrix(f_real)
    y, _ = _as_matrix(f_fake)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("kid: empty feature set")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"kid: dimension {x.shape[1]} vs {y.shape[1]}")
    if subset_size < 1 or n_subsets < 1:
        raise ValueError("kid: subset_size and n_subsets must be positive")
    if subset_size > min(len(x), len(y)):
        raise ValueError(f"kid: subset exceeds set ({subset_size} > {min(len(x), len(y))})")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_subsets):
        xs = x if subset_size == len(x) else x[rng.choice(len(x), subset_size, replace=False)]
        ys = y if subset_size == len(y) else y[rng.choice(len(y), subset_size, replace=False)]
        total += mmd2(xs, ys, estimator)
    return total / n_subsets


def diversity_score(images: ImageSet | np.ndarray) -> float:
    """Mean over pixels of the population standard deviation across the batch."""
    px = images.pixels() if isinstance(images, ImageSet) else np.asarray(images)
    if len(px) < 2:
        raise ValueError(f"insufficient batch: diversity needs >= 2 images, got {len(px)}")
    return float(px.astype(np.float64).std(axis=0).mean())


def is_collapsed(score: float, threshold: float = COLLAPSE_THRESHOLD) -> bool:
    return score < threshold


@dataclass
class MetricReport:
    fid: float
    kid: float
    kid_estimator: str
    diversity: float | None
    n_real: int
    n_fake: int
    extractor_fingerprint: str = ""
    possible_mode_collapse: bool | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(
    f_real: FeatureSet,
    f_fake: FeatureSet,
    fake_images: ImageSet | np.ndarray | None = None,
    estimator: str = "unbiased",
    subset_size: int = 100,
    n_subsets: int = 100,
    seed: int = 0,
    collapse_threshold: float = COLLAPSE_THRESHOLD,
) -> MetricReport:
    """FID + KID (+ diversity when images are given) for two comparable feature sets."""
    f_real.check_comparable(f_fake)
    subset_size = min(subset_size, len(f_real), len(f_fake))
    fid_value = fid(compute_stats(f_real), compute_stats(f_fake))
    kid_value = kid(f_real, f_fake, estimator, subset_size, n_subsets, seed)
    div = diversity_score(fake_images) if fake_images is not None else None
    return MetricReport(
        fid=fid_value,
        kid=kid_value,
        kid_estimator=estimator,
        diversity=div,
        n_real=len(f_real),
        n_fake=len(f_fake),
        extractor_fingerprint=f_real.extractor_fingerprint,
        possible_mode_collapse=None if div is None else is_collapsed(div, collapse_threshold),
    )
