import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import integrate
from scipy.special import log_ndtr, ndtr, ndtri, owens_t
from scipy.stats import multivariate_normal

from censlvm.exceptions import CovarianceException, DegeneratePatternException, IntegrationException

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
PROBABILITY_FLOOR = 1e-300
MAX_DIMENSION = 25

_LOG_2PI = float(np.log(2.0 * np.pi))
_SQRT_2PI = float(np.sqrt(2.0 * np.pi))

# Richtmyer lattice generators are sqrt(prime) mod 1
_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97)
_LATTICE_CHUNK = 2 ** 15


@dataclass(frozen=True)
class Integrator:
    """
    Settings for the randomized lattice rule used above four dimensions.

    The shifts are drawn from a generator seeded with ``seed`` on every call,
    so the same inputs always give bit-identical probabilities. The number of
    points doubles from ``min_points`` until the error estimate meets
    ``abs_tol``; missing it at ``max_points`` raises IntegrationException.
    """
    seed: int = 20130501
    shifts: int = 12
    min_points: int = 1024
    max_points: int = 2 ** 20
    abs_tol: float = 1e-6


DEFAULT_INTEGRATOR = Integrator()


@dataclass(frozen=True, eq=False)
class GaussianMoments:
    """
    Mean vector and covariance matrix of a k-dimensional normal distribution.

    Construction validates symmetry, positive definiteness and conditioning,
    so every function taking a GaussianMoments can assume a usable covariance.
    """
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(f"mean of length {mean.size} does not match covariance of shape {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-12):
            raise CovarianceException("covariance matrix is not symmetric")
        check_covariance(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class TruncatedMoments:
    """
    Integrals of 1, (x - mu) and (x - mu)(x - mu)' against the normal density
    over the lower rectangle below a truncation point.
    """
    alpha: float
    m: np.ndarray
    v: np.ndarray


def check_covariance(cov: np.ndarray, what: str = "covariance matrix"):
    """
    Raise CovarianceException if ``cov`` is not positive definite or has a
    condition number above MAX_CONDITION.
    """
    if cov.size == 0:
        return
    if not np.all(np.isfinite(cov)):
        raise CovarianceException(f"{what} has non-finite entries")
    eigenvalues = np.linalg.eigvalsh(cov)
    if eigenvalues[0] <= 0:
        raise CovarianceException(f"{what} is not positive definite (smallest eigenvalue {eigenvalues[0]:.3g}); "
                                  f"check that the model is identified")
    condition = eigenvalues[-1] / eigenvalues[0]
    if condition > MAX_CONDITION:
        raise CovarianceException(f"{what} is nearly singular (condition number {condition:.3g}); "
                                  f"check that the model is identified")


def safe_log(p: float, row: Optional[int] = None) -> float:
    """
    Logarithm of a pattern probability, refusing probabilities below the floor.
    """
    if not p >= PROBABILITY_FLOOR:
        where = f" in row {row}" if row is not None else ""
        raise DegeneratePatternException(f"degenerate pattern{where}: probability {p:.3g} underflowed", row=row)
    return float(np.log(p))


def mvn_logpdf(x: np.ndarray, g: GaussianMoments) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != g.mean.shape:
        raise ValueError(f"point of length {x.size} does not match dimension {g.dim}")
    return float(multivariate_normal.logpdf(x, mean=g.mean, cov=g.cov))


def mvn_cdf(upper: np.ndarray,
            g: GaussianMoments,
            tol: Optional[float] = None,
            integrator: Integrator = DEFAULT_INTEGRATOR) -> Tuple[float, float]:
    """
    Probability that X <= upper componentwise for X ~ N(g.mean, g.cov).

    Args:
        upper:          Upper integration limits, entries may be +inf or -inf.
        g:              Validated Gaussian moments.
        tol:            Absolute error target for the lattice rule (k > 4).
        integrator:     Lattice rule settings.

    Returns:
        Tuple (probability, error estimate). Dimensions up to four are
        evaluated by closed forms and adaptive quadrature and carry error
        estimates near machine precision.
    """
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    if upper.shape != g.mean.shape:
        raise ValueError(f"limit of length {upper.size} does not match dimension {g.dim}")
    return _cdf(upper, g.mean, g.cov, tol, integrator)


def cdf_gradient(y: np.ndarray, g: GaussianMoments, integrator: Integrator = DEFAULT_INTEGRATOR) -> np.ndarray:
    """
    Gradient of the CDF in its argument: marginal density of each coordinate
    times the CDF of the remaining coordinates given that one.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _cdf_gradient(y, g.mean, g.cov, integrator)


def cdf_hessian(y: np.ndarray, g: GaussianMoments, integrator: Integrator = DEFAULT_INTEGRATOR) -> np.ndarray:
    """
    Hessian of the CDF in its argument. Off-diagonal cells are bivariate
    marginal densities times conditional CDFs; the diagonal follows from
    differentiating density-times-conditional-CDF once more.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _cdf_hessian(y, g.mean, g.cov, None, integrator)


def truncated_moments(y: np.ndarray, g: GaussianMoments,
                      integrator: Integrator = DEFAULT_INTEGRATOR) -> TruncatedMoments:
    """
    Zeroth, first and second centred moment integrals over {x <= y}.

    The distribution is standardized to its correlation matrix R and the
    moments are read off the gradient and Hessian of the standardized CDF:

        m = -Lambda R D(z),   v = alpha Sigma + Lambda R H(z) R Lambda,

    with Lambda = diag(Sigma)^(1/2) and z = Lambda^-1 (y - mu).
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _truncated_moments(y, g.mean, g.cov, integrator)


def cdf_param_gradient(y: np.ndarray, g: GaussianMoments, dmu: np.ndarray, dsigma: np.ndarray,
                       integrator: Integrator = DEFAULT_INTEGRATOR) -> np.ndarray:
    """
    Derivative of Phi_{mu(theta), Sigma(theta)}(y) with respect to theta.

    Args:
        y:          Upper limits (length k).
        g:          Gaussian moments at theta.
        dmu:        d mu / d theta', shape (k, d).
        dsigma:     d vec Sigma / d theta', shape (k*k, d), rows in row-major order.

    Returns:
        Vector of length d.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _, gradient = _cdf_and_param_gradient(y, g.mean, g.cov, np.asarray(dmu, dtype=float),
                                          np.asarray(dsigma, dtype=float), integrator)
    return gradient


def cdf_and_param_gradient(y: np.ndarray, g: GaussianMoments, dmu: np.ndarray, dsigma: np.ndarray,
                           integrator: Integrator = DEFAULT_INTEGRATOR) -> Tuple[float, np.ndarray]:
    """
    Same as cdf_param_gradient but also returns the probability itself.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _cdf_and_param_gradient(y, g.mean, g.cov, np.asarray(dmu, dtype=float),
                                   np.asarray(dsigma, dtype=float), integrator)


def cdf_moment_gradient(y: np.ndarray, g: GaussianMoments,
                        integrator: Integrator = DEFAULT_INTEGRATOR) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Probability below ``y`` with its derivatives in the mean (length k) and
    in vec Sigma (length k*k, row-major). Chaining these with dmu and dsigma
    gives cdf_param_gradient, so rows sharing moments and limits can share
    one evaluation.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != g.mean.shape:
        raise ValueError(f"limit of length {y.size} does not match dimension {g.dim}")
    return _cdf_moment_gradient(y, g.mean, g.cov, integrator)


def univariate_log_cdf(upper: np.ndarray, mean: np.ndarray, var: np.ndarray,
                       dmean: Optional[np.ndarray] = None,
                       dvar: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Vectorized log Phi((upper - mean) / sd) over many one-dimensional blocks,
    with its theta-gradient when dmean (n, d) and dvar (n, d) are given.
    This is the one-dimensional case of cdf_param_gradient divided by the
    probability, evaluated in log space.
    """
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise CovarianceException("conditional variance of a censored coordinate is not positive")
    sd = np.sqrt(var)
    z = (np.asarray(upper, dtype=float) - mean) / sd
    logp = log_ndtr(z)
    if dmean is None:
        return logp, None
    mills = np.exp(-0.5 * z * z - 0.5 * _LOG_2PI - logp)
    dz = -dmean / sd[:, None] - (z / (2.0 * var))[:, None] * dvar
    return logp, mills[:, None] * dz


def _cdf(upper: np.ndarray, mean: np.ndarray, cov: np.ndarray,
         tol: Optional[float], integrator: Integrator) -> Tuple[float, float]:
    if upper.size == 0:
        return 1.0, 0.0
    if np.any(np.isnan(upper)):
        raise ValueError("upper limit contains NaN")
    if np.any(upper == -np.inf):
        return 0.0, 0.0
    keep = np.isfinite(upper)
    if not keep.any():
        return 1.0, 0.0
    sd = np.sqrt(np.diag(cov)[keep])
    z = (upper[keep] - mean[keep]) / sd
    corr = cov[np.ix_(keep, keep)] / np.outer(sd, sd)
    return _standard_cdf(z, corr, tol, integrator)


def _standard_cdf(z: np.ndarray, corr: np.ndarray, tol: Optional[float],
                  integrator: Integrator) -> Tuple[float, float]:
    k = z.size
    if k == 1:
        return float(ndtr(z[0])), 0.0
    if k == 2:
        return _bvn_cdf(z[0], z[1], corr[0, 1]), 1e-15
    if k <= 4:
        return _conditioned_quadrature(z, corr, tol, integrator)
    if k > MAX_DIMENSION:
        raise ValueError(f"CDF dimension {k} exceeds the supported maximum of {MAX_DIMENSION}")
    return _lattice_cdf(z, corr, integrator.abs_tol if tol is None else tol, integrator)


def _bvn_negative(h: float, k: float, r: float) -> float:
    # Owen's T representation, for h <= 0 and k <= 0 where it does not cancel
    if h == 0.0 and k == 0.0:
        return 0.25 + np.arcsin(r) / (2.0 * np.pi)
    s = np.sqrt(1.0 - r * r)
    if h == 0.0:
        t_h = np.copysign(0.25, k - r * h)
    else:
        t_h = owens_t(h, (k - r * h) / (h * s))
    if k == 0.0:
        t_k = np.copysign(0.25, h - r * k)
    else:
        t_k = owens_t(k, (h - r * k) / (k * s))
    beta = 0.5 if (h == 0.0) != (k == 0.0) else 0.0
    return float(0.5 * ndtr(h) + 0.5 * ndtr(k) - t_h - t_k - beta)


def _bvn_cdf(h: float, k: float, r: float) -> float:
    """
    P(X <= h, Y <= k) for a standard bivariate normal with correlation r.
    """
    if h == -np.inf or k == -np.inf:
        return 0.0
    if h == np.inf:
        return float(ndtr(k))
    if k == np.inf:
        return float(ndtr(h))
    if r > 1.0 - 1e-14:
        return float(ndtr(min(h, k)))
    if r < -1.0 + 1e-14:
        return float(max(ndtr(h) + ndtr(k) - 1.0, 0.0))
    if h <= 0.0 and k <= 0.0:
        value = _bvn_negative(h, k, r)
    elif h <= 0.0:
        value = ndtr(h) - _bvn_negative(h, -k, -r)
    elif k <= 0.0:
        value = ndtr(k) - _bvn_negative(-h, k, -r)
    else:
        value = 1.0 - ndtr(-h) - ndtr(-k) + _bvn_negative(-h, -k, r)
    return float(min(max(value, 0.0), 1.0))


def _conditioned_quadrature(z: np.ndarray, corr: np.ndarray, tol: Optional[float],
                            integrator: Integrator) -> Tuple[float, float]:
    # Condition on the most restrictive coordinate and integrate its density
    # against the (k-1)-dimensional conditional CDF.
    i = int(np.argmin(z))
    rest = np.array([j for j in range(z.size) if j != i])
    r = corr[rest, i]
    schur = corr[np.ix_(rest, rest)] - np.outer(r, r)
    sd = np.sqrt(np.diag(schur))
    cond_corr = schur / np.outer(sd, sd)
    z_rest = z[rest]

    def integrand(x):
        return np.exp(-0.5 * x * x) / _SQRT_2PI * _standard_cdf((z_rest - r * x) / sd, cond_corr, tol, integrator)[0]

    lower = min(-10.0, z[i] - 10.0)
    value, error = integrate.quad(integrand, lower, z[i], epsabs=1e-15, epsrel=1e-11, limit=100)
    return float(min(max(value, 0.0), 1.0)), float(error)


def _lattice_cdf(z: np.ndarray, corr: np.ndarray, tol: float, integrator: Integrator) -> Tuple[float, float]:
    # Points i = 1..n of the lattice are kept when n doubles; only new ones are summed.
    z, chol = _genz_order(z, corr)
    k = z.size
    rng = np.random.default_rng(integrator.seed)
    shifts = rng.random((integrator.shifts, k - 1))
    generator = np.sqrt(np.array(_PRIMES[:k - 1], dtype=float)) % 1.0
    sums = np.zeros(integrator.shifts)
    done, n_points = 0, integrator.min_points
    while True:
        for start in range(done, n_points, _LATTICE_CHUNK):
            index = np.arange(start + 1, min(start + _LATTICE_CHUNK, n_points) + 1, dtype=float)
            lattice = (index[:, None] * generator) % 1.0
            for s, shift in enumerate(shifts):
                u = np.abs(2.0 * ((lattice + shift) % 1.0) - 1.0)
                sums[s] += _sov_integrand(z, chol, u).sum()
        done = n_points
        means = sums / n_points
        value = float(np.mean(means))
        error = float(3.0 * np.std(means, ddof=1) / np.sqrt(integrator.shifts))
        if error <= tol or n_points >= integrator.max_points:
            break
        n_points = min(2 * n_points, integrator.max_points)
    if error > tol:
        error_msg = f"lattice CDF error estimate {error:.2g} exceeds {tol:.2g} after {n_points} points"
        logger.error(f"CensLVM : {error_msg} : dimension {k}")
        raise IntegrationException(error_msg)
    return min(max(value, 0.0), 1.0), error


def _genz_order(z: np.ndarray, corr: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reorders the variables so that each step conditions on the one with the
    smallest conditional probability given the expected values of those
    already placed, building the Cholesky factor as it goes.
    """
    k = z.size
    z = z.copy()
    a = corr.copy()
    chol = np.zeros((k, k))
    y = np.zeros(k)
    for i in range(k):
        rest = np.arange(i, k)
        var = np.diag(a)[rest] - np.sum(chol[rest, :i] ** 2, axis=1)
        if np.any(~(var > 0)):
            raise CovarianceException("correlation matrix lost positive definiteness while ordering the lattice rule")
        limits = (z[rest] - chol[rest, :i] @ y[:i]) / np.sqrt(var)
        j = i + int(np.argmin(limits))
        if j != i:
            z[[i, j]] = z[[j, i]]
            a[[i, j]] = a[[j, i]]
            a[:, [i, j]] = a[:, [j, i]]
            chol[[i, j], :i] = chol[[j, i], :i]
        chol[i, i] = np.sqrt(var[j - i])
        chol[i + 1:, i] = (a[i + 1:, i] - chol[i + 1:, :i] @ chol[i, :i]) / chol[i, i]
        # mean of a standard normal truncated above the limit
        y[i] = -np.exp(-0.5 * limits[j - i] ** 2 - 0.5 * _LOG_2PI - log_ndtr(limits[j - i]))
    return z, chol


def _sov_integrand(z: np.ndarray, chol: np.ndarray, u: np.ndarray) -> np.ndarray:
    n, k = u.shape[0], z.size
    y = np.zeros((n, k - 1))
    e = np.full(n, ndtr(z[0] / chol[0, 0]))
    f = e.copy()
    for i in range(1, k):
        w = np.clip(u[:, i - 1] * e, 1e-300, 1.0 - 1e-16)
        y[:, i - 1] = ndtri(w)
        e = ndtr((z[i] - y[:, :i] @ chol[i, :i]) / chol[i, i])
        f *= e
    return f


def _cdf_gradient(y: np.ndarray, mean: np.ndarray, cov: np.ndarray, integrator: Integrator) -> np.ndarray:
    k = y.size
    grad = np.zeros(k)
    for i in range(k):
        if not np.isfinite(y[i]):
            continue
        s2 = cov[i, i]
        dev = y[i] - mean[i]
        density = np.exp(-0.5 * dev * dev / s2) / np.sqrt(2.0 * np.pi * s2)
        if k == 1:
            grad[i] = density
            continue
        rest = np.arange(k) != i
        c = cov[rest, i]
        cond_mean = mean[rest] + c / s2 * dev
        cond_cov = cov[np.ix_(rest, rest)] - np.outer(c, c) / s2
        grad[i] = density * _cdf(y[rest], cond_mean, cond_cov, None, integrator)[0]
    return grad


def _cdf_hessian(y: np.ndarray, mean: np.ndarray, cov: np.ndarray, grad: Optional[np.ndarray],
                 integrator: Integrator) -> np.ndarray:
    k = y.size
    hess = np.zeros((k, k))
    finite = np.isfinite(y)
    for i in range(k):
        for j in range(i + 1, k):
            if not (finite[i] and finite[j]):
                continue
            pair = np.array([i, j])
            block = cov[np.ix_(pair, pair)]
            dev = y[pair] - mean[pair]
            block_inv = np.linalg.inv(block)
            det = block[0, 0] * block[1, 1] - block[0, 1] ** 2
            density = np.exp(-0.5 * dev @ block_inv @ dev) / (2.0 * np.pi * np.sqrt(det))
            if k > 2:
                rest = np.ones(k, dtype=bool)
                rest[pair] = False
                gain = cov[np.ix_(rest, pair)] @ block_inv
                cond_mean = mean[rest] + gain @ dev
                cond_cov = cov[np.ix_(rest, rest)] - gain @ cov[np.ix_(pair, rest)]
                density *= _cdf(y[rest], cond_mean, cond_cov, None, integrator)[0]
            hess[i, j] = hess[j, i] = density
    if grad is None:
        grad = _cdf_gradient(y, mean, cov, integrator)
    for i in range(k):
        if not finite[i]:
            continue
        off = cov[i] @ hess[i] - cov[i, i] * hess[i, i]
        hess[i, i] = (-(y[i] - mean[i]) * grad[i] - off) / cov[i, i]
    return hess


def _truncated_moments(y: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                       integrator: Integrator) -> TruncatedMoments:
    variances = np.diag(cov)
    if np.any(~(variances > 0)):
        raise CovarianceException("truncated moments need strictly positive variances")
    sd = np.sqrt(variances)
    z = (y - mean) / sd
    corr = cov / np.outer(sd, sd)
    zero = np.zeros_like(z)
    alpha = _cdf(z, zero, corr, None, integrator)[0]
    grad = _cdf_gradient(z, zero, corr, integrator)
    hess = _cdf_hessian(z, zero, corr, grad, integrator)
    m = -sd * (corr @ grad)
    v = alpha * cov + (corr @ hess @ corr) * np.outer(sd, sd)
    return TruncatedMoments(alpha=float(alpha), m=m, v=0.5 * (v + v.T))


def _cdf_moment_gradient(y: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                         integrator: Integrator) -> Tuple[float, np.ndarray, np.ndarray]:
    moments = _truncated_moments(y, mean, cov, integrator)
    cov_inv = np.linalg.inv(cov)
    d_mean = cov_inv @ moments.m
    d_cov = 0.5 * (-cov_inv.ravel() * moments.alpha + (cov_inv @ moments.v @ cov_inv).ravel())
    return moments.alpha, d_mean, d_cov


def _cdf_and_param_gradient(y: np.ndarray, mean: np.ndarray, cov: np.ndarray, dmu: np.ndarray,
                            dsigma: np.ndarray, integrator: Integrator) -> Tuple[float, np.ndarray]:
    k = y.size
    if dmu.ndim != 2 or dmu.shape[0] != k:
        raise ValueError(f"dmu must have {k} rows, got shape {dmu.shape}")
    if dsigma.ndim != 2 or dsigma.shape != (k * k, dmu.shape[1]):
        raise ValueError(f"dsigma must have shape ({k * k}, {dmu.shape[1]}), got {dsigma.shape}")
    if k == 0:
        return 1.0, np.zeros(dmu.shape[1])
    alpha, d_mean, d_cov = _cdf_moment_gradient(y, mean, cov, integrator)
    return alpha, dsigma.T @ d_cov + dmu.T @ d_mean
