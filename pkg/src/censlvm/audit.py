import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from censlvm import mvn
from censlvm.likelihood import MISSING, PreparedData, evaluate, prepare_data
from censlvm.model import ParameterMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AuditReport:
    """
    Analytic against numerical scores for a set of rows.
    ``max_error`` is the worst relative error per parameter.
    """
    names: Tuple[str, ...]
    rows: Tuple[int, ...]
    analytic: np.ndarray
    numeric: np.ndarray
    max_error: np.ndarray
    tolerance: float

    @property
    def worst(self) -> float:
        return float(np.max(self.max_error)) if self.max_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame({"max_relative_error": self.max_error}, index=list(self.names))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))


def score_check(pm: ParameterMap,
                theta: np.ndarray,
                data: Union[pd.DataFrame, PreparedData],
                step: float = 1e-5,
                tolerance: float = 1e-5,
                rows: Optional[Sequence[int]] = None,
                integrator: mvn.Integrator = mvn.DEFAULT_INTEGRATOR) -> AuditReport:
    """
    Compares the analytic per-row score with central differences of the
    per-row log-likelihood.

    Args:
        step:       Relative step, h_t = step * max(1, |theta_t|).
        tolerance:  Largest acceptable relative error.
        rows:       Row positions to audit (default every non-empty row).
        integrator: Lattice settings for censored blocks above four dimensions.
    """
    prepared = data if isinstance(data, PreparedData) else prepare_data(pm.spec, data)
    if rows is None:
        rows = np.nonzero(~(prepared.status == MISSING).all(axis=1))[0]
    prepared = prepared.take(rows)
    theta = np.asarray(theta, dtype=float)

    analytic = evaluate(pm, theta, prepared, want_score=True, integrator=integrator)[1]
    numeric = np.zeros_like(analytic)
    for t in range(pm.d):
        h = step * max(1.0, abs(theta[t]))
        up, down = theta.copy(), theta.copy()
        up[t] += h
        down[t] -= h
        numeric[:, t] = (evaluate(pm, up, prepared, want_score=False, integrator=integrator)[0]
                         - evaluate(pm, down, prepared, want_score=False, integrator=integrator)[0]) / (2.0 * h)
        logger.debug(f"{pm.names[t]}: max |analytic - numeric| "
                     f"{np.max(np.abs(analytic[:, t] - numeric[:, t])) if len(rows) else 0.0:.3g}")

    errors = relative_error(analytic, numeric)
    max_error = errors.max(axis=0) if errors.shape[0] else np.zeros(pm.d)
    report = AuditReport(names=pm.names, rows=tuple(int(r) for r in rows), analytic=analytic, numeric=numeric,
                         max_error=max_error, tolerance=tolerance)
    logger.info(f"score audit over {len(report.rows)} row(s): worst relative error {report.worst:.3g}")
    return report
