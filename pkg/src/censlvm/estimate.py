import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, validator
from scipy import linalg, optimize
from scipy.special import ndtr
from scipy.stats import chi2, norm

from censlvm.exceptions import CensLVMException, EstimationException, ModelSpecificationException, \
    NonIdentifiedException
from censlvm.likelihood import PreparedData, evaluate, prepare_data
from censlvm.model import BINARY, GROUPS, VARIANCES, ParameterMap, starting_values
from censlvm.mvn import MAX_CONDITION

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray, np.ndarray]]


class FitOptions(BaseModel):
    """
    Optimizer settings shared by full and composite likelihood fits.
    """
    method: str = "bhhh"
    max_iter: int = 500
    gtol: float = 1e-6
    xtol: float = 1e-9
    armijo: float = 1e-4
    max_backtrack: int = 40
    ridge: float = 1e-8

    class Config:
        allow_mutation = False
        extra = "forbid"

    @validator("method")
    def method_is_known(cls, v):
        if v not in ("bhhh", "bfgs"):
            raise ValueError(f"method must be 'bhhh' or 'bfgs', got '{v}'")
        return v

    @validator("max_iter", "max_backtrack")
    def positive_count(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @validator("gtol", "xtol", "armijo", "ridge")
    def positive_tolerance(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v


@dataclass(frozen=True, eq=False)
class FitResult:
    """
    Outcome of a full or composite likelihood fit.

    ``theta_hat`` is on the internal scale (log-variances); ``estimates``,
    ``vcov`` and ``se`` are on the natural scale via the delta method. ``p``
    is NaN for variance parameters.
    """
    names: Tuple[str, ...]
    groups: Tuple[str, ...]
    display: Tuple[str, ...]
    theta_hat: np.ndarray
    estimates: np.ndarray
    loglik: float
    vcov: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray
    iterations: int
    converged: bool
    gradient_norm: float
    n: int
    composite: bool = False
    message: str = ""
    labels: frozenset = field(default_factory=frozenset)

    @property
    def d(self) -> int:
        return len(self.names)

    def to_dict(self) -> Dict:
        return {"names": list(self.names), "groups": list(self.groups), "theta": self.theta_hat,
                "estimates": self.estimates, "se": self.se, "z": self.z, "p": self.p, "vcov": self.vcov,
                "loglik": self.loglik, "iterations": self.iterations, "converged": self.converged,
                "gradient_norm": self.gradient_norm, "n": self.n, "composite": self.composite,
                "message": self.message}


class ChiSquareResult(NamedTuple):
    stat: float
    df: int
    p: float


@dataclass(frozen=True)
class _Trace:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str


def _bhhh_direction(info: np.ndarray, grad: np.ndarray, ridge: float) -> np.ndarray:
    d = grad.size
    try:
        eigenvalues = np.linalg.eigvalsh(info)
        if eigenvalues[0] > 0 and eigenvalues[-1] / eigenvalues[0] < MAX_CONDITION:
            return linalg.cho_solve(linalg.cho_factor(info), grad)
    except (np.linalg.LinAlgError, linalg.LinAlgError):
        pass
    shift = ridge * max(np.trace(info), 1.0) / d
    logger.debug(f"information singular or ill-conditioned, adding ridge {shift:.3g}")
    return np.linalg.solve(info + shift * np.eye(d), grad)


def _gradient_small(grad: np.ndarray, value: float, n: int, options: FitOptions) -> bool:
    return float(np.max(np.abs(grad))) < options.gtol * max(1.0, abs(value) / max(n, 1))


def _bhhh(objective: Objective, theta0: np.ndarray, n: int, options: FitOptions) -> _Trace:
    """
    BHHH ascent with Armijo backtracking. ``objective`` returns the value,
    the gradient and the outer-product information at theta.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    value, grad, info = objective(theta)
    if not np.isfinite(value):
        raise EstimationException("log-likelihood is not finite at the starting values")
    logger.info(f"BHHH start: loglik {value:.8g}, {theta.size} parameters")

    for iteration in range(1, options.max_iter + 1):
        direction = _bhhh_direction(info, grad, options.ridge)
        slope = float(grad @ direction)
        relative_step = float(np.max(np.abs(direction)) / max(1.0, float(np.max(np.abs(theta)))))
        if _gradient_small(grad, value, n, options) and relative_step < options.xtol:
            return _Trace(theta, value, grad, iteration - 1, True, "converged")

        step = 1.0
        accepted = None
        for _ in range(options.max_backtrack):
            candidate = theta + step * direction
            try:
                result = objective(candidate)
            except CensLVMException as e:
                logger.debug(f"step {step:.3g} rejected: {e}")
                result = None
            if result is not None and np.isfinite(result[0]) and result[0] >= value + options.armijo * step * slope:
                accepted = candidate, result
                break
            step *= 0.5

        if accepted is None:
            return _Trace(theta, value, grad, iteration - 1, False, "line search failed to find an ascent step")

        theta, (new_value, grad, info) = accepted
        assert new_value >= value
        value = new_value
        logger.debug(f"iteration {iteration}: loglik {value:.10g}, step {step:.3g}, "
                     f"max|score| {np.max(np.abs(grad)):.3g}")

    converged = _gradient_small(grad, value, n, options)
    return _Trace(theta, value, grad, options.max_iter, False,
                  f"iteration limit {options.max_iter} reached" + (" (score criterion met)" if converged else ""))


def _bfgs(objective: Objective, theta0: np.ndarray, n: int, options: FitOptions) -> _Trace:
    start = objective(np.asarray(theta0, dtype=float))
    if not np.isfinite(start[0]):
        raise EstimationException("log-likelihood is not finite at the starting values")

    def negative(theta):
        try:
            value, grad, _ = objective(theta)
        except CensLVMException:
            return np.inf, np.zeros_like(theta)
        return -value, -grad

    result = optimize.minimize(negative, theta0, jac=True, method="BFGS",
                               options={"gtol": options.gtol * max(1.0, abs(start[0]) / max(n, 1)),
                                        "maxiter": options.max_iter})
    value, grad, _ = objective(result.x)
    return _Trace(result.x, value, grad, int(result.nit), bool(result.success) or _gradient_small(grad, value, n,
                                                                                                   options),
                  str(result.message))


def maximize(objective: Objective, theta0: np.ndarray, n: int, options: Optional[FitOptions] = None) -> _Trace:
    """
    BHHH from theta0, then BFGS from where BHHH stopped if it did not
    converge (line search failure or iteration limit).
    """
    options = options or FitOptions()
    if options.method == "bfgs":
        return _bfgs(objective, theta0, n, options)
    trace = _bhhh(objective, theta0, n, options)
    if trace.converged:
        return trace
    logger.warning(f"BHHH stopped without converging ({trace.message}), continuing with BFGS")
    fallback = _bfgs(objective, trace.theta, n, options)
    if fallback.converged and fallback.value >= trace.value:
        return _Trace(fallback.theta, fallback.value, fallback.grad, trace.iterations + fallback.iterations, True,
                      f"converged by BFGS after BHHH stopped: {trace.message}")
    return _Trace(trace.theta, trace.value, trace.grad, trace.iterations, False,
                  f"{trace.message}; BFGS fallback did not converge: {fallback.message}")


def build_result(pm: ParameterMap, trace: _Trace, vcov_internal: np.ndarray, n: int, composite: bool,
                 message: str = "") -> FitResult:
    """
    Moves a fit from the internal to the natural scale and assembles the
    Wald statistics.
    """
    theta = trace.theta
    estimates = pm.natural(theta)
    jac = pm.jacobian(theta)
    vcov = jac[:, None] * vcov_internal * jac[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        se = np.sqrt(np.diag(vcov))
        z = estimates / se
    p = 2.0 * norm.sf(np.abs(z))
    is_variance = np.array([g == VARIANCES for g in pm.groups], dtype=bool)
    p = np.where(is_variance, np.nan, p)
    converged = trace.converged and not message
    text = "; ".join(m for m in (trace.message, message) if m)
    return FitResult(names=pm.names, groups=pm.groups, display=pm.display, theta_hat=theta, estimates=estimates,
                     loglik=float(trace.value), vcov=vcov, se=se, z=z, p=p, iterations=trace.iterations,
                     converged=converged, gradient_norm=float(np.max(np.abs(trace.grad))) if trace.grad.size else 0.0,
                     n=n, composite=composite, message=text, labels=pm.labels)


def information(pm: ParameterMap, theta: np.ndarray, data: Union[pd.DataFrame, PreparedData]) -> np.ndarray:
    """
    Outer-product-of-scores information, sum over rows of S_i S_i'.
    """
    scores = evaluate(pm, theta, data, want_score=True)[1]
    return scores.T @ scores


def fit_mle(pm: ParameterMap,
            data: Union[pd.DataFrame, PreparedData],
            options: Optional[FitOptions] = None,
            start: Optional[np.ndarray] = None) -> FitResult:
    """
    Maximum likelihood fit by BHHH (or BFGS when options.method == 'bfgs').

    Args:
        pm:         Compiled model.
        data:       Dataset, as a DataFrame or PreparedData.
        options:    Optimizer settings.
        start:      Starting values on the internal scale. Defaults to
                    starting_values(pm, data), which needs a DataFrame.

    Returns:
        FitResult with vcov the inverse outer-product information at the
        optimum. Non-convergence and singular information are reported through
        ``converged`` and ``message``, not raised.

    Raises:
        EstimationException if the model has no free parameters or the
        log-likelihood is not finite at the start.
    """
    options = options or FitOptions()
    if pm.d == 0:
        raise EstimationException("the model has no free parameters")
    prepared = prepare_data(pm.spec, data) if not isinstance(data, PreparedData) else data
    if start is None:
        if isinstance(data, PreparedData):
            raise EstimationException("starting values need the dataset as a DataFrame")
        start = starting_values(pm, data)
    start = np.asarray(start, dtype=float)
    if start.shape != (pm.d,) or not np.all(np.isfinite(start)):
        raise EstimationException("starting values must be a finite vector with one entry per free parameter")

    def objective(theta):
        rows, scores = evaluate(pm, theta, prepared, want_score=True)
        return float(np.sum(rows)), np.sum(scores, axis=0), scores.T @ scores

    trace = maximize(objective, start, prepared.n, options)
    logger.info(f"fit finished after {trace.iterations} iteration(s): loglik {trace.value:.8g}, {trace.message}")

    info = objective(trace.theta)[2]
    vcov, message = _invert_information(info)
    return build_result(pm, trace, vcov, prepared.n, composite=False, message=message)


def _invert_information(info: np.ndarray) -> Tuple[np.ndarray, str]:
    eigenvalues = np.linalg.eigvalsh(info)
    if eigenvalues[0] <= 0 or eigenvalues[-1] / eigenvalues[0] > MAX_CONDITION:
        message = (f"information matrix is singular (smallest eigenvalue {eigenvalues[0]:.3g}); "
                   f"the model is probably not identified")
        logger.warning(message)
        return np.full_like(info, np.nan), message
    vcov = np.linalg.inv(info)
    return 0.5 * (vcov + vcov.T), ""


def lr_test(fit_restricted: FitResult, fit_full: FitResult) -> ChiSquareResult:
    """
    Likelihood ratio test of a restricted fit against a fit that nests it.

    Nesting is checked by parameter names: every free parameter of the
    restricted fit must be free in the full fit, unless it is a label (an
    equality constraint that the full fit released).

    Raises:
        ValueError for composite fits, different sample sizes or fits that
        do not nest.
    """
    if fit_restricted.composite or fit_full.composite:
        raise ValueError("likelihood ratio tests need full-likelihood fits")
    if fit_restricted.n != fit_full.n:
        raise ValueError(f"fits use different sample sizes ({fit_restricted.n} and {fit_full.n})")
    extra = set(fit_restricted.names) - set(fit_full.names) - set(fit_restricted.labels)
    if extra or fit_restricted.d > fit_full.d:
        raise ValueError(f"restricted fit does not nest in the full fit (not free in the full fit: "
                         f"{', '.join(sorted(extra)) or '-'})")
    stat = 2.0 * (fit_full.loglik - fit_restricted.loglik)
    if stat < -1e-8:
        logger.warning(f"restricted fit has a higher log-likelihood than the full fit ({stat:.3g}); "
                       f"the full fit may not have converged")
    stat = max(stat, 0.0)
    df = fit_full.d - fit_restricted.d
    p = float(chi2.sf(stat, df)) if df > 0 else 1.0
    return ChiSquareResult(stat=stat, df=df, p=p)


def wald_test(fit: FitResult, names: Sequence[str]) -> ChiSquareResult:
    """
    Wald test that the named parameters are jointly zero.
    """
    if not names:
        raise ValueError("no parameters to test")
    try:
        index = [fit.names.index(name) for name in names]
    except ValueError as e:
        raise ValueError(f"unknown parameter in {list(names)}") from e
    estimates = fit.estimates[index]
    vcov = fit.vcov[np.ix_(index, index)]
    if not np.all(np.isfinite(vcov)):
        raise NonIdentifiedException("covariance of the estimates is not available")
    stat = float(estimates @ np.linalg.solve(vcov, estimates))
    return ChiSquareResult(stat=stat, df=len(index), p=float(chi2.sf(stat, len(index))))


def probability_at(pm: ParameterMap,
                   theta: np.ndarray,
                   item: str,
                   eta: Union[float, Sequence[float], np.ndarray],
                   covariates: Union[None, Mapping[str, float], Sequence[float]] = None) -> Union[float, np.ndarray]:
    """
    P(item = 1) at given latent values: Phi of the item's linear predictor.

    Args:
        eta:            Latent values, one per latent variable, or an (m, l)
                        grid of such vectors (a 1-d grid is accepted when the
                        model has a single latent variable).
        covariates:     Mapping name -> value (absent names are 0) or a vector
                        in model covariate order.

    Returns:
        A probability, or an array of m probabilities for a grid.
    """
    spec = pm.spec
    if item not in spec.manifest or spec.kind(item) != BINARY:
        raise ModelSpecificationException(f"'{item}' is not a binary item of the model")
    j = spec.manifest.index(item)
    l, q = len(spec.latent), len(spec.covariates)

    if covariates is None:
        x = np.zeros(q)
    elif isinstance(covariates, Mapping):
        unknown = set(covariates) - set(spec.covariates)
        if unknown:
            raise ModelSpecificationException(f"unknown covariates: {', '.join(sorted(unknown))}")
        x = np.array([float(covariates.get(name, 0.0)) for name in spec.covariates])
    else:
        x = np.asarray(covariates, dtype=float).reshape(-1)
        if x.size != q:
            raise ValueError(f"expected {q} covariate values, got {x.size}")

    grid = np.asarray(eta, dtype=float)
    single = grid.ndim == 0 or (grid.ndim == 1 and grid.size == l and l != 1)
    if grid.ndim == 0:
        grid = grid.reshape(1, 1)
    elif grid.ndim == 1:
        grid = grid.reshape(1, l) if single else grid.reshape(-1, 1)
    if grid.shape[1] != l:
        raise ValueError(f"expected {l} latent value(s) per point, got {grid.shape[1]}")

    mats = pm.matrices(theta)
    loadings = mats["Lambda"][j].copy()
    for s, slope in enumerate(spec.slopes):
        if slope.outcome == item:
            loadings[spec.latent.index(slope.latent)] += mats["slope"][s, 0] * x[spec.covariates.index(slope.moderator)]
    predictor = mats["nu"][j, 0] + grid @ loadings + mats["K"][j] @ x
    probability = ndtr(predictor)
    return float(probability[0]) if single else probability


def conditional_probability(fit: FitResult,
                            pm: ParameterMap,
                            item: str,
                            eta: Union[float, Sequence[float], np.ndarray],
                            covariates: Union[None, Mapping[str, float], Sequence[float]] = None):
    if tuple(fit.names) != pm.names:
        raise ValueError("fit and model have different parameters")
    return probability_at(pm, fit.theta_hat, item, eta, covariates)


def parameter_table(fit: FitResult) -> pd.DataFrame:
    """
    Estimates grouped as in the printed summary, one row per free parameter.
    """
    table = pd.DataFrame({"group": fit.groups, "parameter": fit.display, "estimate": fit.estimates,
                          "std_error": fit.se, "z_value": fit.z, "p_value": fit.p}, index=list(fit.names))
    table["group"] = pd.Categorical(table["group"], categories=list(GROUPS), ordered=True)
    return table.sort_values("group", kind="stable")


def format_table(fit: FitResult) -> str:
    table = parameter_table(fit)
    lines = [f"{'':<22}{'Estimate':>13}{'Std. Error':>13}{'Z value':>11}{'Pr(>|z|)':>12}"]
    for group in GROUPS:
        rows = table[table["group"] == group]
        if rows.empty:
            continue
        lines.append(f"{group}:")
        for _, row in rows.iterrows():
            if group == VARIANCES:
                lines.append(f"   {row['parameter']:<19}{row['estimate']:>13.5g}{row['std_error']:>13.5g}")
            else:
                lines.append(f"   {row['parameter']:<19}{row['estimate']:>13.5g}{row['std_error']:>13.5g}"
                             f"{row['z_value']:>11.4g}{row['p_value']:>12.4g}")
    kind = "composite log-likelihood" if fit.composite else "log-likelihood"
    lines.append("")
    lines.append(f"{kind}: {fit.loglik:.6f}  n: {fit.n}  iterations: {fit.iterations}  "
                 f"converged: {'yes' if fit.converged else 'no'}")
    if fit.message and not fit.converged:
        lines.append(f"note: {fit.message}")
    return "\n".join(lines)
