import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from censlvm.complik import BlockPlan, fit_cl
from censlvm.estimate import FitOptions, fit_mle
from censlvm.exceptions import CensLVMException
from censlvm.model import ParameterMap
from censlvm.simulate import simulate

logger = logging.getLogger(__name__)

MLE = "mle"
COMPOSITE = "cl"

STUDY_COLUMNS = ["truth", "mean", "variance", "bias", "mse", "ave_se", "sd", "se_ratio"]


@dataclass(frozen=True)
class _Replication:
    pm: ParameterMap
    theta: np.ndarray
    n: int
    estimator: str
    plan: Optional[BlockPlan]
    options: FitOptions


def _replicate_once(job: _Replication, seed: int) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    try:
        data = simulate(job.pm, job.theta, job.n, seed=seed)
        if job.estimator == COMPOSITE:
            fit = fit_cl(job.pm, data, job.plan, job.options)
        else:
            fit = fit_mle(job.pm, data, job.options)
    except CensLVMException as e:
        logger.warning(f"replication with seed {seed} failed: {e}")
        return None
    if not fit.converged:
        logger.warning(f"replication with seed {seed} did not converge: {fit.message}")
        return None
    return fit.estimates, fit.se


def replication_seeds(seed: int, reps: int) -> np.ndarray:
    """
    One independent seed per replication, spawned from the master seed, so
    results do not depend on the order replications run in.
    """
    children = np.random.SeedSequence(seed).spawn(reps)
    return np.array([int(child.generate_state(1, dtype=np.uint64)[0]) for child in children], dtype=np.uint64)


def replicate(pm: ParameterMap,
              theta: np.ndarray,
              n: int,
              reps: int,
              seed: int,
              estimator: str = MLE,
              plan: Optional[BlockPlan] = None,
              options: Optional[FitOptions] = None,
              jobs: int = 1) -> pd.DataFrame:
    """
    Monte Carlo study: ``reps`` times simulate n rows at theta and refit.

    Args:
        pm:             Compiled model.
        theta:          True parameters (internal scale).
        n:              Rows per replication.
        reps:           Number of replications.
        seed:           Master seed.
        estimator:      'mle' or 'cl' (composite, needs ``plan``).
        plan:           Block plan for composite fits.
        options:        Optimizer settings.
        jobs:           Worker processes; 1 runs in this process.

    Returns:
        DataFrame indexed by parameter name with the true value, the mean
        estimate, the Monte Carlo variance, bias, MSE, average standard
        error, the standard deviation of the estimates and Ave(SE)/SD.
        With one successful replication SD and the ratio are NaN. The number
        of failed replications is in ``attrs['failed']``.
    """
    if reps < 1:
        raise ValueError("at least one replication is needed")
    if estimator not in (MLE, COMPOSITE):
        raise ValueError(f"estimator must be '{MLE}' or '{COMPOSITE}'")
    if estimator == COMPOSITE and plan is None:
        raise ValueError("composite replications need a block plan")
    job = _Replication(pm=pm, theta=np.asarray(theta, dtype=float), n=n, estimator=estimator, plan=plan,
                       options=options or FitOptions())
    seeds = [int(s) for s in replication_seeds(seed, reps)]

    logger.info(f"running {reps} replication(s) of n={n} with {estimator}")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_replicate_once, [job] * reps, seeds))
    else:
        outcomes = []
        for r, s in enumerate(seeds, start=1):
            outcomes.append(_replicate_once(job, s))
            if r % 50 == 0:
                logger.info(f"{r}/{reps} replications done")

    done = [o for o in outcomes if o is not None]
    failed = reps - len(done)
    if failed:
        logger.warning(f"{failed} of {reps} replication(s) failed and were left out")
    truth = pm.natural(job.theta)
    if not done:
        table = pd.DataFrame(np.nan, index=list(pm.names), columns=STUDY_COLUMNS)
        table["truth"] = truth
        table.attrs["failed"] = failed
        return table

    estimates = np.array([o[0] for o in done])
    ses = np.array([o[1] for o in done])
    mean = estimates.mean(axis=0)
    if len(done) > 1:
        variance = estimates.var(axis=0, ddof=1)
        sd = np.sqrt(variance)
    else:
        variance = np.full(pm.d, np.nan)
        sd = np.full(pm.d, np.nan)
    ave_se = ses.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = ave_se / sd
    table = pd.DataFrame({"truth": truth, "mean": mean, "variance": variance, "bias": mean - truth,
                          "mse": ((estimates - truth) ** 2).mean(axis=0), "ave_se": ave_se, "sd": sd,
                          "se_ratio": ratio}, index=list(pm.names))
    table.attrs["failed"] = failed
    table.attrs["replications"] = len(done)
    return table
