import logging
from dataclasses import dataclass
from itertools import combinations
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from censlvm.estimate import FitOptions, FitResult, build_result, maximize
from censlvm.exceptions import EstimationException, ModelSpecificationException, NonIdentifiedException
from censlvm.likelihood import PreparedData, evaluate, prepare_data
from censlvm.model import BINARY, CENSORED, ModelSpec, ParameterMap, starting_values
from censlvm.mvn import MAX_CONDITION

logger = logging.getLogger(__name__)

ADJACENT = "adjacent"
ALL_PAIRS = "all_pairs"
CUSTOM = "custom"


@dataclass(frozen=True)
class BlockPlan:
    """
    Marginal blocks of manifest variables, as indices in model order.
    """
    blocks: Tuple[Tuple[int, ...], ...]
    names: Tuple[Tuple[str, ...], ...]

    def __len__(self):
        return len(self.blocks)


def build_blocks(spec: ModelSpec,
                 k: int = 2,
                 strategy: str = ADJACENT,
                 custom: Optional[Sequence[Sequence[str]]] = None) -> BlockPlan:
    """
    Builds the marginal blocks of a composite likelihood.

    Only binary and censored variables are split; continuous uncensored
    variables are added to every block. ``adjacent`` takes sliding windows of
    size k in declaration order, ``all_pairs`` every subset of size k, and
    ``custom`` the given lists of names as they are.

    Raises:
        ModelSpecificationException for an unknown strategy, k < 1, k larger
        than the number of splittable variables or unknown names.
    """
    if strategy not in (ADJACENT, ALL_PAIRS, CUSTOM):
        raise ModelSpecificationException(f"unknown block strategy '{strategy}'")
    manifest = spec.manifest
    if strategy == CUSTOM:
        if not custom:
            raise ModelSpecificationException("custom block strategy needs at least one block")
        blocks = []
        for block in custom:
            unknown = [name for name in block if name not in manifest]
            if unknown:
                raise ModelSpecificationException(f"block names unknown variables: {', '.join(unknown)}")
            blocks.append(tuple(sorted({manifest.index(name) for name in block})))
        return _plan(spec, blocks)

    if k < 1:
        raise ModelSpecificationException(f"block size must be at least 1, got {k}")
    split = [i for i, name in enumerate(manifest) if spec.kind(name) in (BINARY, CENSORED)]
    kept = [i for i, name in enumerate(manifest) if spec.kind(name) not in (BINARY, CENSORED)]
    if not split:
        return _plan(spec, [tuple(range(len(manifest)))])
    if k > len(split):
        raise ModelSpecificationException(f"block size {k} exceeds the {len(split)} binary/censored variables")
    if strategy == ADJACENT:
        windows = [split[i:i + k] for i in range(len(split) - k + 1)]
    else:
        windows = [list(c) for c in combinations(split, k)]
    return _plan(spec, [tuple(sorted(w + kept)) for w in windows])


def _plan(spec: ModelSpec, blocks: List[Tuple[int, ...]]) -> BlockPlan:
    return BlockPlan(blocks=tuple(blocks), names=tuple(tuple(spec.manifest[i] for i in b) for b in blocks))


def check_coverage(pm: ParameterMap, plan: BlockPlan):
    """
    Raise NonIdentifiedException if some manifest variable that carries a
    free parameter appears in no block.
    """
    covered = {i for block in plan.blocks for i in block}
    uncovered = set()
    for cells in pm.slots:
        for matrix, i, j in cells:
            if matrix in ("nu", "Lambda", "K"):
                rows = (i,)
            elif matrix == "Theta":
                rows = (i, j)
            else:
                continue
            uncovered.update(r for r in rows if r not in covered)
    if uncovered:
        names = ", ".join(pm.spec.manifest[i] for i in sorted(uncovered))
        raise NonIdentifiedException(f"blocks do not cover variables with free parameters: {names}")


def block_contributions(pm: ParameterMap,
                        theta: np.ndarray,
                        data: Union[pd.DataFrame, PreparedData],
                        plan: BlockPlan,
                        want_score: bool = True) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Per-row, per-block log-likelihoods (n, K) and scores (n, K, d). Each
    block is the full likelihood machinery with the variables outside the
    block treated as missing.
    """
    prepared = data if isinstance(data, PreparedData) else prepare_data(pm.spec, data)
    values = np.zeros((prepared.n, len(plan)))
    scores = np.zeros((prepared.n, len(plan), pm.d)) if want_score else None
    for b, block in enumerate(plan.blocks):
        rows, block_scores = evaluate(pm, theta, prepared, want_score=want_score, keep=block)
        values[:, b] = rows
        if want_score:
            scores[:, b] = block_scores
    return values, scores


def cl_loglik(pm: ParameterMap, theta: np.ndarray, data: Union[pd.DataFrame, PreparedData],
              plan: BlockPlan) -> float:
    return float(np.sum(np.sum(block_contributions(pm, theta, data, plan, want_score=False)[0], axis=1)))


def cl_score(pm: ParameterMap, theta: np.ndarray, data: Union[pd.DataFrame, PreparedData],
             plan: BlockPlan) -> np.ndarray:
    return np.sum(block_contributions(pm, theta, data, plan)[1], axis=(0, 1))


def godambe(scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Sensitivity I (average of per-block outer products), variability J
    (average outer product of the summed composite score) and the sandwich
    vcov = I^-1 J I^-1 / n, from block scores of shape (n, K, d).

    Raises:
        NonIdentifiedException when I is singular.
    """
    n = scores.shape[0]
    flat = scores.reshape(-1, scores.shape[2])
    sensitivity = flat.T @ flat / n
    summed = scores.sum(axis=1)
    variability = summed.T @ summed / n
    eigenvalues = np.linalg.eigvalsh(sensitivity)
    if eigenvalues[0] <= 0 or eigenvalues[-1] / eigenvalues[0] > MAX_CONDITION:
        raise NonIdentifiedException(f"composite information is singular (smallest eigenvalue "
                                     f"{eigenvalues[0]:.3g}); the blocks do not identify every parameter")
    inverse = np.linalg.inv(sensitivity)
    vcov = inverse @ variability @ inverse / n
    return sensitivity, variability, 0.5 * (vcov + vcov.T)


def fit_cl(pm: ParameterMap,
           data: pd.DataFrame,
           plan: BlockPlan,
           options: Optional[FitOptions] = None,
           start: Optional[np.ndarray] = None) -> FitResult:
    """
    Composite marginal likelihood fit over the blocks of ``plan``.

    The same BHHH loop as fit_mle is used with the direction taken from the
    per-block outer products. Standard errors come from the Godambe sandwich.

    Raises:
        NonIdentifiedException if the blocks miss a free parameter or the
        composite information is singular at the optimum.
    """
    options = options or FitOptions()
    if pm.d == 0:
        raise EstimationException("the model has no free parameters")
    check_coverage(pm, plan)
    prepared = prepare_data(pm.spec, data)
    start = starting_values(pm, data) if start is None else np.asarray(start, dtype=float)

    def objective(theta):
        values, scores = block_contributions(pm, theta, prepared, plan)
        flat = scores.reshape(-1, pm.d)
        return float(np.sum(np.sum(values, axis=1))), np.sum(scores, axis=(0, 1)), flat.T @ flat

    logger.info(f"composite fit over {len(plan)} block(s)")
    trace = maximize(objective, start, prepared.n, options)
    logger.info(f"composite fit finished after {trace.iterations} iteration(s): {trace.message}")

    _, scores = block_contributions(pm, trace.theta, prepared, plan)
    _, _, vcov = godambe(scores)
    return build_result(pm, trace, vcov, prepared.n, composite=True)
