"""Dense numeric kernels: temperature softmax, multivariate Gaussian log-density,
regularized covariance estimation, and a central-difference gradient oracle.

Everything here is pure, double precision, and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NumericError, ParameterError, ShapeError

DEFAULT_SHRINKAGE = 1e-4

_LOG_2PI = float(np.log(2.0 * np.pi))


def softmax_temp(logits, tau):
    """Softmax of ``logits / tau`` with max-subtraction for overflow safety."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError(f"expected a nonempty 1-D logit vector, got shape {z.shape}")
    s = z / tau
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def log_softmax_temp(logits, tau):
    """log of softmax_temp, computed via log-sum-exp (never exp-then-log)."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ShapeError(f"expected a nonempty 1-D logit vector, got shape {z.shape}")
    s = z / tau
    m = s.max()
    return s - m - np.log(np.exp(s - m).sum())


@dataclass(frozen=True)
class ClassGaussian:
    """Per-class Gaussian over logit space: mean, shrunk covariance, sample count."""

    class_id: int
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    # cached Cholesky factor of the covariance, computed lazily
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ShapeError(f"covariance must be square, got shape {cov.shape}")
        if mean.ndim != 1 or mean.size != cov.shape[0]:
            raise ShapeError(
                f"mean dimension {mean.shape} incompatible with covariance {cov.shape}"
            )
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0.0):
            raise NumericError("covariance is not symmetric within 1e-12")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise NumericError("covariance is not positive definite") from exc
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self):
        return self.mean.size


def gaussian_logpdf(z, g: ClassGaussian):
    """log N(z | g.mean, g.covariance) for a single point z."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != g.mean.shape:
        raise ShapeError(f"point shape {z.shape} != Gaussian dimension {g.mean.shape}")
    # solve via the cached Cholesky factor: quadratic form = |L^-1 (z-mu)|^2
    diff = z - g.mean
    y = np.linalg.solve(g._chol, diff)
    logdet = 2.0 * np.log(np.diag(g._chol)).sum()
    out = -0.5 * (g.dim * _LOG_2PI + logdet + y @ y)
    if not np.isfinite(out):
        raise NumericError("gaussian_logpdf produced a non-finite value")
    return float(out)


def gaussian_logpdf_grad(z, g: ClassGaussian):
    """Gradient of gaussian_logpdf w.r.t. z: -Sigma^-1 (z - mean)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != g.mean.shape:
        raise ShapeError(f"point shape {z.shape} != Gaussian dimension {g.mean.shape}")
    diff = z - g.mean
    y = np.linalg.solve(g._chol, diff)
    return -np.linalg.solve(g._chol.T, y)


def estimate_class_stats(samples, epsilon=DEFAULT_SHRINKAGE, class_id=0):
    """Fit a ClassGaussian to a list of vectors.

    Mean is the arithmetic average; covariance is the unbiased sample
    covariance plus epsilon * I.  With a single sample the covariance is
    epsilon * I; with sample count <= dimension the off-diagonal entries are
    dropped (diagonal fallback) so the shrunk matrix stays well conditioned.
    """
    if epsilon <= 0:
        raise ParameterError(f"shrinkage epsilon must be positive, got {epsilon}")
    if len(samples) == 0:
        raise ParameterError("need at least one sample to estimate class stats")
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"samples must be a list of vectors, got shape {x.shape}")
    n, d = x.shape
    mean = x.mean(axis=0)
    if n == 1:
        cov = np.zeros((d, d))
    else:
        centered = x - mean
        cov = centered.T @ centered / (n - 1)
        if n <= d:
            cov = np.diag(np.diag(cov))
    cov = cov + epsilon * np.eye(d)
    cov = 0.5 * (cov + cov.T)
    return ClassGaussian(class_id=class_id, mean=mean, covariance=cov, sample_count=n)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at x."""
    if h <= 0:
        raise ParameterError(f"step size must be positive, got {h}")
    x = np.array(x, dtype=np.float64)  # private copy; perturbed in place below
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"function not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
