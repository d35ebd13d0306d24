import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from censlvm.exceptions import DataException, ModelSpecificationException, ParameterMapException
from censlvm.model import BINARY, CENSORED, CONTINUOUS, COVARIANCES, INTERCEPTS, ParameterMap
from censlvm.mvn import check_covariance
from censlvm.util import LEFT_FLAG, OBSERVED_FLAG, RIGHT_FLAG, status_column

logger = logging.getLogger(__name__)

KINDS_ATTR = "kinds"


@dataclass(frozen=True)
class CensoringLaw:
    """
    Censoring point of one side of a variable. With ``scale`` zero the
    point is fixed at ``bound``; otherwise each row draws its own point from
    N(bound, scale^2).
    """
    side: str
    bound: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        if self.side not in (LEFT_FLAG, RIGHT_FLAG):
            raise ValueError(f"censoring side must be 'left' or 'right', got '{self.side}'")
        if self.scale < 0:
            raise ValueError("censoring scale must be non-negative")


def default_values(pm: ParameterMap) -> np.ndarray:
    """
    Natural-scale parameter values used when none are given: intercepts 0,
    residual covariances 0, everything else 1.
    """
    return np.array([0.0 if g in (INTERCEPTS, COVARIANCES) else 1.0 for g in pm.groups])


def theta_from_values(pm: ParameterMap, values: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """
    Internal-scale theta from a name -> natural value mapping, on top of the
    defaults of default_values.
    """
    natural = default_values(pm)
    for name, value in (values or {}).items():
        natural[pm.index_of(name)] = float(value)
    try:
        return pm.internal(natural)
    except ParameterMapException as e:
        error_msg = "parameter values are not admissible"
        logger.error(f"CensLVM : {error_msg} : {e}")
        raise ParameterMapException(f"{error_msg}: {e}") from e


def _draw_normal(rng: np.random.Generator, cov: np.ndarray, n: int, what: str) -> np.ndarray:
    if cov.shape[0] == 0:
        return np.zeros((n, 0))
    check_covariance(cov, what)
    return rng.standard_normal((n, cov.shape[0])) @ np.linalg.cholesky(cov).T


def simulate(pm: ParameterMap,
             theta: np.ndarray,
             n: Optional[int] = None,
             covariates: Optional[pd.DataFrame] = None,
             seed: Optional[int] = None,
             censoring: Optional[Mapping[str, Sequence[CensoringLaw]]] = None) -> pd.DataFrame:
    """
    Draws a dataset from the model at theta.

    Latent responses follow the structural and measurement equations; binary
    items are then 1 where the latent response is positive, and censored
    variables are clipped at their censoring points with ``<name>_status``
    flags. Censoring points come from ``censoring`` or, failing that, from
    the bounds declared in the model. A censored variable with neither is
    left uncensored.

    Args:
        pm:             Compiled model.
        theta:          Parameters on the internal scale.
        n:              Number of rows. Defaults to the rows of ``covariates``.
        covariates:     Covariate values for conditional simulation. Without
                        it covariates are independent standard normals.
        seed:           Seed for a counter-based (Philox) generator.
        censoring:      Per-variable censoring laws.

    Returns:
        DataFrame with the manifest columns in model order (each censored
        variable followed by its status column) and then the covariates.

    Raises:
        CovarianceException or ModelSpecificationException if theta is not
        admissible.
    """
    spec = pm.spec
    if covariates is not None:
        missing = [c for c in spec.covariates if c not in covariates.columns]
        if missing:
            raise DataException(f"covariate source is missing columns: {', '.join(missing)}")
        if n is not None and n != len(covariates):
            raise DataException(f"asked for {n} rows but the covariate source has {len(covariates)}")
        n = len(covariates)
    if n is None or n < 1:
        raise ValueError("number of rows must be at least 1")

    rng = np.random.Generator(np.random.Philox(seed))
    q, l = len(spec.covariates), len(spec.latent)
    if covariates is None:
        x = rng.standard_normal((n, q))
    else:
        x = covariates[list(spec.covariates)].to_numpy(dtype=float, na_value=np.nan)

    mats = pm.matrices(theta)
    zeta = _draw_normal(rng, mats["Psi"], n, "latent residual covariance")
    eps = _draw_normal(rng, mats["Theta"], n, "measurement residual covariance")

    lam = np.broadcast_to(mats["Lambda"], (n,) + mats["Lambda"].shape).copy()
    beta = np.broadcast_to(mats["B"], (n, l, l)).copy()
    for s, slope in enumerate(spec.slopes):
        moderator = x[:, spec.covariates.index(slope.moderator)] * mats["slope"][s, 0]
        col = spec.latent.index(slope.latent)
        if slope.outcome in spec.latent:
            beta[:, spec.latent.index(slope.outcome), col] += moderator
        else:
            lam[:, spec.manifest.index(slope.outcome), col] += moderator

    rhs = mats["alpha"][:, 0] + x @ mats["Gamma"].T + zeta
    if l:
        try:
            eta = np.linalg.solve(np.eye(l)[None] - beta, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            error_msg = "I - B is singular at the given parameter values"
            logger.error(f"CensLVM : {error_msg} : {e}")
            raise ModelSpecificationException(error_msg) from e
    else:
        eta = np.zeros((n, 0))
    ystar = mats["nu"][:, 0] + np.einsum("npl,nl->np", lam, eta) + x @ mats["K"].T + eps

    data = pd.DataFrame({name: ystar[:, j] for j, name in enumerate(spec.manifest)})
    data.attrs[KINDS_ATTR] = {name: CONTINUOUS for name in spec.manifest}
    for name in spec.manifest:
        if spec.kind(name) == BINARY:
            data = dichotomize(data, name, 0.0)
        elif spec.kind(name) == CENSORED:
            laws = list((censoring or {}).get(name, [])) or _declared_laws(spec, name)
            for law in laws:
                bound = law.bound + law.scale * rng.standard_normal(n) if law.scale > 0 else law.bound
                data = censor(data, name, law.side, bound)
    for r, name in enumerate(spec.covariates):
        data[name] = x[:, r]

    columns = []
    for name in spec.manifest:
        columns.append(name)
        if status_column(name) in data.columns:
            columns.append(status_column(name))
    data = data[columns + list(spec.covariates)]
    logger.debug(f"simulated {n} rows")
    return data


def _declared_laws(spec, name: str):
    left, right = spec.bounds.get(name, (None, None))
    laws = []
    if left is not None:
        laws.append(CensoringLaw(side=LEFT_FLAG, bound=left))
    if right is not None:
        laws.append(CensoringLaw(side=RIGHT_FLAG, bound=right))
    return laws


def _kinds(data: pd.DataFrame) -> Dict[str, str]:
    return dict(data.attrs.get(KINDS_ATTR, {}))


def dichotomize(data: pd.DataFrame, column: str, cut: float = 0.0) -> pd.DataFrame:
    """
    Replaces a continuous column by 1 where it exceeds ``cut`` and 0
    otherwise; missing cells stay missing. A column already dichotomized is
    returned unchanged.
    """
    if column not in data.columns:
        raise DataException(f"no column {column}")
    kinds = _kinds(data)
    out = data.copy()
    if kinds.get(column) == BINARY:
        return out
    if status_column(column) in data.columns:
        raise DataException(f"{column} is censored and cannot be dichotomized")
    values = pd.to_numeric(data[column], errors="coerce")
    out[column] = (values > cut).astype("Int64").where(values.notna(), pd.NA).astype("Int64")
    kinds[column] = BINARY
    out.attrs[KINDS_ATTR] = kinds
    return out


def censor(data: pd.DataFrame, column: str, side: str, bound: Union[float, np.ndarray]) -> pd.DataFrame:
    """
    Clips a column at ``bound`` (a number or one value per row) from the
    given side and records the flag in ``<column>_status``. Flags already set
    by an earlier call on the other side are kept.
    """
    if side not in (LEFT_FLAG, RIGHT_FLAG):
        raise ValueError(f"side must be 'left' or 'right', got '{side}'")
    if column not in data.columns:
        raise DataException(f"no column {column}")
    kinds = _kinds(data)
    if kinds.get(column) == BINARY:
        raise DataException(f"{column} is binary and cannot be censored")
    out = data.copy()
    values = pd.to_numeric(data[column], errors="coerce").to_numpy(dtype=float, na_value=np.nan)
    bound = np.broadcast_to(np.asarray(bound, dtype=float), values.shape)
    status = status_column(column)
    if status in out.columns:
        flags = out[status].astype(object).to_numpy().copy()
    else:
        flags = np.where(np.isnan(values), None, OBSERVED_FLAG).astype(object)

    hit = (values >= bound) if side == RIGHT_FLAG else (values <= bound)
    hit &= ~np.isnan(values)
    values = np.where(hit, bound, values)
    flags[hit] = side
    out[column] = values
    out[status] = flags
    kinds[column] = CENSORED
    out.attrs[KINDS_ATTR] = kinds
    return out
