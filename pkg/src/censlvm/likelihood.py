import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from censlvm import mvn
from censlvm.exceptions import CensLVMException, CovarianceException, DataException, DegeneratePatternException
from censlvm.model import BINARY, CENSORED, ModelSpec, MomentSystem, ParameterMap, moment_batch
from censlvm.util import LEFT_FLAG, OBSERVED_FLAG, RIGHT_FLAG, STATUS_FLAGS, status_column

logger = logging.getLogger(__name__)

OBSERVED = 0
RIGHT = 1
LEFT = 2
MISSING = 3

_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_FLOOR = float(np.log(mvn.PROBABILITY_FLOOR))


@dataclass(frozen=True, eq=False)
class PreparedData:
    """
    Array form of a dataset.

    ``values`` holds observed values, censoring bounds (0 for binary items)
    or NaN for missing cells; ``status`` holds one of OBSERVED, RIGHT, LEFT,
    MISSING per cell; ``covariates`` is the (n, q) covariate matrix.
    """
    values: np.ndarray
    status: np.ndarray
    covariates: np.ndarray
    index: Tuple

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def take(self, rows: Sequence[int]) -> "PreparedData":
        rows = np.asarray(rows, dtype=int)
        return PreparedData(values=self.values[rows], status=self.status[rows], covariates=self.covariates[rows],
                            index=tuple(self.index[i] for i in rows))


@dataclass(frozen=True, eq=False)
class ObservationPattern:
    """
    Partition of the manifest variables of one row. ``right_bounds`` and
    ``left_bounds`` carry the censoring points of the coordinates in
    ``right_idx`` and ``left_idx``; ``signs`` is the diagonal of the sign
    matrix, right block first.
    """
    observed_idx: Tuple[int, ...]
    right_idx: Tuple[int, ...]
    left_idx: Tuple[int, ...]
    missing_idx: Tuple[int, ...]
    right_bounds: Tuple[float, ...]
    left_bounds: Tuple[float, ...]

    @property
    def censored_idx(self) -> Tuple[int, ...]:
        return self.right_idx + self.left_idx

    @property
    def signs(self) -> np.ndarray:
        return np.array([1.0] * len(self.right_idx) + [-1.0] * len(self.left_idx))

    @property
    def L(self) -> np.ndarray:
        return np.diag(self.signs)


@dataclass(frozen=True, eq=False)
class ConditionalMoments:
    """
    Distribution of the censored block given the observed block:
    mu (k), sigma (k x k), dmu (k x d), dsigma (k*k x d).
    """
    mu: np.ndarray
    sigma: np.ndarray
    dmu: np.ndarray
    dsigma: np.ndarray


def prepare_data(spec: ModelSpec, data: pd.DataFrame) -> PreparedData:
    """
    Validates a dataset against a model and converts it to arrays.

    Binary items must hold 0, 1 or missing; 1 becomes right-censored at 0 and
    0 becomes left-censored at 0. Censored variables read their flag from
    ``<name>_status`` (absent column or empty flag means observed).

    Raises:
        DataException naming the column and row at fault.
    """
    if data is None or len(data) == 0:
        raise DataException("dataset has no rows")
    missing = [c for c in spec.manifest + spec.covariates if c not in data.columns]
    if missing:
        raise DataException(f"dataset is missing columns: {', '.join(missing)}")

    n, p = len(data), len(spec.manifest)
    values = np.full((n, p), np.nan)
    status = np.full((n, p), OBSERVED, dtype=np.int8)

    for j, name in enumerate(spec.manifest):
        try:
            column = pd.to_numeric(data[name], errors="raise").to_numpy(dtype=float, na_value=np.nan)
        except (TypeError, ValueError) as e:
            error_msg = f"column {name} is not numeric"
            logger.error(f"CensLVM : {error_msg} : {e}")
            raise DataException(error_msg) from e
        absent = np.isnan(column)
        flags = _flags(data, name)
        kind = spec.kind(name)

        if kind == BINARY:
            bad = ~absent & (column != 0) & (column != 1)
            if bad.any():
                raise DataException(f"binary column {name} holds a value other than 0/1 in row "
                                    f"{data.index[np.argmax(bad)]}")
            status[:, j] = np.where(column == 1, RIGHT, LEFT)
            values[:, j] = 0.0
        elif kind == CENSORED:
            side = spec.censoring[name]
            for flag, allowed in ((LEFT_FLAG, ("left", "both")), (RIGHT_FLAG, ("right", "both"))):
                wrong = ~absent & (flags == flag)
                if wrong.any() and side not in allowed:
                    raise DataException(f"{name} is declared {side}-censored but row {data.index[np.argmax(wrong)]} "
                                        f"is flagged {flag}")
            status[:, j] = np.select([flags == RIGHT_FLAG, flags == LEFT_FLAG], [RIGHT, LEFT], OBSERVED)
            values[:, j] = column
        else:
            flagged = ~absent & (flags != OBSERVED_FLAG)
            if flagged.any():
                raise DataException(f"{name} is continuous but row {data.index[np.argmax(flagged)]} carries "
                                    f"censoring flag '{flags[np.argmax(flagged)]}'")
            values[:, j] = column
        status[absent, j] = MISSING

    covariates = np.empty((n, len(spec.covariates)))
    for r, name in enumerate(spec.covariates):
        column = pd.to_numeric(data[name], errors="coerce").to_numpy(dtype=float, na_value=np.nan)
        if np.isnan(column).any():
            raise DataException(f"covariate {name} is missing or non-numeric in row "
                                f"{data.index[np.argmax(np.isnan(column))]}")
        covariates[:, r] = column
    return PreparedData(values=values, status=status, covariates=covariates, index=tuple(data.index))


def _flags(data: pd.DataFrame, name: str) -> np.ndarray:
    column = status_column(name)
    if column not in data.columns:
        return np.full(len(data), OBSERVED_FLAG, dtype=object)
    flags = data[column].astype(object).where(data[column].notna(), OBSERVED_FLAG)
    flags = flags.astype(str).str.strip().replace("", OBSERVED_FLAG).to_numpy(dtype=object)
    unknown = sorted(set(flags) - set(STATUS_FLAGS))
    if unknown:
        raise DataException(f"column {column} has unknown censoring flags: {', '.join(unknown)}")
    return flags


def _as_prepared(spec: ModelSpec, data: Union[pd.DataFrame, PreparedData]) -> PreparedData:
    if isinstance(data, PreparedData):
        return data
    return prepare_data(spec, data)


def _row_frame(row: Union[Mapping, pd.Series]) -> pd.DataFrame:
    if isinstance(row, pd.Series):
        return row.to_frame().T.reset_index(drop=True)
    return pd.DataFrame([dict(row)])


def _pattern_of(status: np.ndarray, values: np.ndarray) -> ObservationPattern:
    right = tuple(int(i) for i in np.nonzero(status == RIGHT)[0])
    left = tuple(int(i) for i in np.nonzero(status == LEFT)[0])
    return ObservationPattern(observed_idx=tuple(int(i) for i in np.nonzero(status == OBSERVED)[0]),
                              right_idx=right, left_idx=left,
                              missing_idx=tuple(int(i) for i in np.nonzero(status == MISSING)[0]),
                              right_bounds=tuple(float(values[i]) for i in right),
                              left_bounds=tuple(float(values[i]) for i in left))


def classify_pattern(row: Union[Mapping, pd.Series], spec: ModelSpec) -> ObservationPattern:
    prepared = prepare_data(spec, _row_frame(row))
    return _pattern_of(prepared.status[0], prepared.values[0])


def _conditional_block(xi, dxi, omega, domega, values, obs, cens, want_score: bool):
    """
    Batched Gaussian term of the observed block and conditional moments of
    the censored block for rows sharing one pattern.

    Shapes: xi (n, p), dxi (n, p, d), omega (n, p, p), domega (n, p, p, d).
    """
    n, d = xi.shape[0], dxi.shape[2]
    loglik = np.zeros(n)
    score = np.zeros((n, d)) if want_score else None
    m = len(obs)

    inv1 = resid = dom1 = dxi1 = None
    if m:
        om1 = omega[:, obs][:, :, obs]
        try:
            chol = np.linalg.cholesky(om1)
        except np.linalg.LinAlgError as e:
            error_msg = "covariance of the observed block is not positive definite"
            logger.error(f"CensLVM : {error_msg} : {e}")
            raise CovarianceException(error_msg) from e
        inv1 = np.linalg.inv(om1)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        resid = values[:, obs] - xi[:, obs]
        w = np.einsum("nab,nb->na", inv1, resid)
        loglik += -0.5 * (m * _LOG_2PI + logdet + np.einsum("na,na->n", resid, w))
        if want_score:
            dom1 = domega[:, obs][:, :, obs]
            dxi1 = dxi[:, obs]
            score += (-0.5 * np.einsum("nab,nbat->nt", inv1, dom1)
                      + 0.5 * np.einsum("na,nabt,nb->nt", w, dom1, w)
                      + np.einsum("nat,na->nt", dxi1, w))

    if not len(cens):
        return loglik, score, None

    if m:
        om_co = omega[:, cens][:, :, obs]
        gain = om_co @ inv1
        mu = xi[:, cens] + np.einsum("nkm,nm->nk", gain, resid)
        sigma = omega[:, cens][:, :, cens] - gain @ np.swapaxes(om_co, 1, 2)
        dmu = dsigma = None
        if want_score:
            dom_co = domega[:, cens][:, :, obs]
            dgain = np.einsum("nkjt,nji->nkit", dom_co - np.einsum("nkm,nmjt->nkjt", gain, dom1), inv1)
            dmu = dxi[:, cens] + np.einsum("nkit,ni->nkt", dgain, resid) - np.einsum("nkm,nmt->nkt", gain, dxi1)
            cross = np.einsum("nkmt,nlm->nklt", dom_co, gain)
            dsigma = (domega[:, cens][:, :, cens] - cross - np.swapaxes(cross, 1, 2)
                      + np.einsum("nkm,nmjt,nlj->nklt", gain, dom1, gain))
    else:
        mu = xi[:, cens]
        sigma = omega[:, cens][:, :, cens]
        dmu = dxi[:, cens] if want_score else None
        dsigma = domega[:, cens][:, :, cens] if want_score else None
    sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
    return loglik, score, (mu, sigma, dmu, dsigma)


def conditional_moments(ms: MomentSystem, pat: ObservationPattern,
                        row: Union[Mapping, pd.Series, np.ndarray]) -> ConditionalMoments:
    """
    Conditional mean and covariance of the censored block (right coordinates
    first, then left) given the observed block, with derivatives.

    ``row`` is either the prepared value vector of the row, or a record
    holding the manifest values in model order.
    """
    p = ms.xi.size
    if isinstance(row, np.ndarray):
        values = row.astype(float)
    else:
        values = np.asarray(list(row.values()) if isinstance(row, Mapping) else row.to_numpy(), dtype=float)
    if values.size != p:
        raise DataException(f"row has {values.size} values, the model has {p} manifest variables")
    values = np.where(np.isnan(values), 0.0, values)
    obs, cens = list(pat.observed_idx), list(pat.censored_idx)
    _, _, block = _conditional_block(ms.xi[None], ms.dxi[None], ms.omega[None],
                                     ms.domega.reshape(p, p, -1)[None], values[None], obs, cens, True)
    d = ms.dxi.shape[1]
    if block is None:
        return ConditionalMoments(mu=np.zeros(0), sigma=np.zeros((0, 0)), dmu=np.zeros((0, d)),
                                  dsigma=np.zeros((0, d)))
    mu, sigma, dmu, dsigma = block
    k = len(cens)
    mvn.check_covariance(sigma[0], "conditional covariance of the censored block")
    return ConditionalMoments(mu=mu[0], sigma=sigma[0], dmu=dmu[0], dsigma=dsigma[0].reshape(k * k, d))


def _censored_term(block, bounds: np.ndarray, signs: np.ndarray, rows: np.ndarray, want_score: bool,
                   integrator: mvn.Integrator):
    """
    log Phi_{-L mu, L Sigma L}(-L y0) per row, and its theta-gradient.

    Rows with identical limits and conditional moments share one CDF
    evaluation; only the chain rule through dmu and dsigma runs per row.
    """
    mu, sigma, dmu, dsigma = block
    n, k = mu.shape
    flip = np.outer(signs, signs)
    upper = -signs * bounds
    mean = -signs * mu
    cov = sigma * flip
    if want_score:
        dmean = -signs[None, :, None] * dmu
        dcov = dsigma * flip[None, :, :, None]

    if k == 1:
        logp, grad = mvn.univariate_log_cdf(upper[:, 0], mean[:, 0], cov[:, 0, 0],
                                            dmean[:, 0, :] if want_score else None,
                                            dcov[:, 0, 0, :] if want_score else None)
        low = logp < _LOG_FLOOR
        if low.any():
            row = int(rows[np.argmax(low)])
            raise DegeneratePatternException(f"degenerate pattern in row {row}: probability "
                                             f"{np.exp(logp[np.argmax(low)]):.3g} underflowed", row=row)
        return logp, grad

    keys, first, inverse = np.unique(np.hstack([upper, mean, cov.reshape(n, k * k)]), axis=0,
                                     return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    logp = np.empty(len(keys))
    d_mean = np.empty((len(keys), k))
    d_cov = np.empty((len(keys), k * k))
    for u, i in enumerate(first):
        row = int(rows[i])
        try:
            g = mvn.GaussianMoments(mean[i], cov[i])
            if want_score:
                p, d_mean[u], d_cov[u] = mvn.cdf_moment_gradient(upper[i], g, integrator)
            else:
                p = mvn.mvn_cdf(upper[i], g, integrator=integrator)[0]
            logp[u] = mvn.safe_log(p, row)
        except DegeneratePatternException:
            raise
        except CensLVMException as e:
            raise _row_error(e, row) from e
        if want_score:
            d_mean[u] /= p
            d_cov[u] /= p
    if not want_score:
        return logp[inverse], None
    grad = (np.einsum("nkt,nk->nt", dmean, d_mean[inverse])
            + np.einsum("nqt,nq->nt", dcov.reshape(n, k * k, -1), d_cov[inverse]))
    return logp[inverse], grad


def _row_error(e: CensLVMException, row: int) -> CensLVMException:
    error_msg = f"cannot evaluate row {row}: {e}"
    logger.error(f"CensLVM : {error_msg} : {e}")
    return type(e)(error_msg)


def _fails(attempt) -> bool:
    try:
        attempt()
    except CensLVMException:
        return True
    return False


def evaluate(pm: ParameterMap,
             theta: np.ndarray,
             data: Union[pd.DataFrame, PreparedData],
             want_score: bool = True,
             keep: Optional[Sequence[int]] = None,
             integrator: mvn.Integrator = mvn.DEFAULT_INTEGRATOR) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Per-row log-likelihood contributions and scores.

    Rows are grouped by censoring pattern and every group is evaluated in one
    batch. Rows with every component missing contribute 0 and are counted in
    a warning.

    Args:
        pm:             Compiled model.
        theta:          Parameter vector (internal scale).
        data:           DataFrame or PreparedData.
        want_score:     Also compute the (n, d) score matrix.
        keep:           Manifest indices to keep; the rest are treated as
                        missing. Used for composite-likelihood blocks.
        integrator:     Settings for CDFs above four dimensions.

    Returns:
        Tuple (loglik rows (n,), score rows (n, d) or None).
    """
    prepared = _as_prepared(pm.spec, data)
    theta = np.asarray(theta, dtype=float)
    status = prepared.status
    if keep is not None:
        status = status.copy()
        dropped = np.setdiff1d(np.arange(status.shape[1]), np.asarray(keep, dtype=int))
        status[:, dropped] = MISSING

    batch = moment_batch(pm, theta, prepared.covariates)
    n, d = prepared.n, pm.d
    loglik = np.zeros(n)
    score = np.zeros((n, d)) if want_score else None

    empty = (status == MISSING).all(axis=1)
    if empty.any() and keep is None:
        logger.warning(f"skipped {int(empty.sum())} row(s) with every variable missing")

    patterns, inverse = np.unique(status, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(-1)
    for g, pattern in enumerate(patterns):
        if (pattern == MISSING).all():
            continue
        rows = np.nonzero(inverse == g)[0]
        obs = list(np.nonzero(pattern == OBSERVED)[0])
        right = list(np.nonzero(pattern == RIGHT)[0])
        left = list(np.nonzero(pattern == LEFT)[0])
        cens = right + left
        values = prepared.values[rows]

        def conditional(members):
            return _conditional_block(batch.xi[members], batch.dxi[members], batch.omega[members],
                                      batch.domega[members], prepared.values[members], obs, cens, want_score)

        try:
            part, part_score, block = conditional(rows)
        except CensLVMException as e:
            row = next((int(r) for r in rows if _fails(lambda: conditional(np.array([r])))), int(rows[0]))
            raise _row_error(e, row) from e
        if block is not None:
            signs = np.array([1.0] * len(right) + [-1.0] * len(left))
            logp, grad = _censored_term(block, values[:, cens], signs, rows, want_score, integrator)
            part = part + logp
            if want_score:
                part_score = part_score + grad
        loglik[rows] = part
        if want_score:
            score[rows] = part_score
    return loglik, score


def loglik_obs(pm: ParameterMap, theta: np.ndarray, row: Union[Mapping, pd.Series]) -> float:
    prepared = prepare_data(pm.spec, _row_frame(row))
    if (prepared.status == MISSING).all():
        raise DataException("row has no non-missing component")
    return float(evaluate(pm, theta, prepared, want_score=False)[0][0])


def score_obs(pm: ParameterMap, theta: np.ndarray, row: Union[Mapping, pd.Series]) -> np.ndarray:
    prepared = prepare_data(pm.spec, _row_frame(row))
    if (prepared.status == MISSING).all():
        raise DataException("row has no non-missing component")
    return evaluate(pm, theta, prepared, want_score=True)[1][0]


def loglik(pm: ParameterMap, theta: np.ndarray, data: Union[pd.DataFrame, PreparedData]) -> float:
    """
    Sum of per-row contributions. Numpy's pairwise summation over rows in
    dataset order keeps the result reproducible.
    """
    return float(np.sum(evaluate(pm, theta, data, want_score=False)[0]))


def score(pm: ParameterMap, theta: np.ndarray, data: Union[pd.DataFrame, PreparedData]) -> np.ndarray:
    return np.sum(evaluate(pm, theta, data, want_score=True)[1], axis=0)
