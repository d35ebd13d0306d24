import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError, root_validator, validator

from censlvm.audit import score_check
from censlvm.complik import ADJACENT, ALL_PAIRS, CUSTOM, build_blocks, fit_cl
from censlvm.estimate import FitOptions, fit_mle, format_table, probability_at
from censlvm.exceptions import DataException, ModelSpecificationException, ModelSyntaxException, \
    NonIdentifiedException, ParameterMapException, CensLVMException
from censlvm.model import compile, parse_model, starting_values
from censlvm.simulate import theta_from_values, simulate
from censlvm.study import COMPOSITE, MLE, replicate
from censlvm.util import read_blocks, read_dataset, read_parameter_values, read_result, write_dataset, write_result

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_AUDIT = 1
EXIT_SPECIFICATION = 2
EXIT_DATA = 3
EXIT_ESTIMATION = 4

READ_PATHS = ("model", "data", "theta", "covariates", "result", "blocks_file")


class RunConfig(BaseModel):
    """
    Validated command line of one run.
    """
    command: str
    model: Path
    data: Optional[Path] = None
    out: Optional[Path] = None
    seed: Optional[int] = None
    tol: Optional[float] = None
    method: str = "bhhh"
    blocks: str = ADJACENT
    blocks_file: Optional[Path] = None
    k: int = 2
    reps: int = 1
    n: int = 500
    jobs: int = 1
    estimator: str = MLE
    theta: Optional[Path] = None
    covariates: Optional[Path] = None
    result: Optional[Path] = None
    item: Optional[str] = None
    eta_grid: str = "-3:3:61"
    rows: Optional[int] = None
    quiet: bool = False

    class Config:
        allow_mutation = False

    @validator("reps", "n", "jobs", "k")
    def at_least_one(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @validator("tol")
    def positive_tol(cls, v):
        if v is not None and not v > 0:
            raise ValueError("must be positive")
        return v

    @root_validator(skip_on_failure=True)
    def seed_required(cls, values):
        if values.get("command") in ("simulate", "study") and values.get("seed") is None:
            raise ValueError(f"--seed is required for {values.get('command')}")
        return values

    def missing_paths(self) -> List[Path]:
        return [getattr(self, name) for name in READ_PATHS
                if getattr(self, name) is not None and not getattr(self, name).exists()]

    def fit_options(self) -> FitOptions:
        if self.tol is None:
            return FitOptions(method=self.method)
        return FitOptions(method=self.method, gtol=self.tol)


def _load_model(cfg: RunConfig):
    return compile(parse_model(cfg.model.read_text()))


def _plan(cfg: RunConfig, spec):
    if cfg.blocks_file is not None:
        return build_blocks(spec, strategy=CUSTOM, custom=read_blocks(cfg.blocks_file))
    return build_blocks(spec, k=cfg.k, strategy=ALL_PAIRS if cfg.blocks in ("pairs", ALL_PAIRS) else ADJACENT)


def _theta(cfg: RunConfig, pm):
    values = read_parameter_values(cfg.theta) if cfg.theta is not None else None
    return theta_from_values(pm, values)


def _report_fit(cfg: RunConfig, fit) -> int:
    print(format_table(fit))
    if cfg.out is not None:
        write_result(fit.to_dict(), cfg.out)
    if not fit.converged:
        logger.warning(f"estimation did not converge: {fit.message}")
        return EXIT_ESTIMATION
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    pm = _load_model(cfg)
    data = read_dataset(cfg.data)
    return _report_fit(cfg, fit_mle(pm, data, cfg.fit_options()))


def cmd_clfit(cfg: RunConfig) -> int:
    pm = _load_model(cfg)
    data = read_dataset(cfg.data)
    plan = _plan(cfg, pm.spec)
    logger.info(f"blocks: {'; '.join(','.join(b) for b in plan.names)}")
    return _report_fit(cfg, fit_cl(pm, data, plan, cfg.fit_options()))


def cmd_simulate(cfg: RunConfig) -> int:
    pm = _load_model(cfg)
    covariates = read_dataset(cfg.covariates) if cfg.covariates is not None else None
    data = simulate(pm, _theta(cfg, pm), None if covariates is not None else cfg.n, covariates=covariates,
                    seed=cfg.seed)
    if cfg.out is None:
        data.to_csv(sys.stdout, index=False, float_format="%.17g")
    else:
        write_dataset(data, cfg.out)
    return EXIT_OK


def cmd_study(cfg: RunConfig) -> int:
    pm = _load_model(cfg)
    plan = _plan(cfg, pm.spec) if cfg.estimator == COMPOSITE else None
    table = replicate(pm, _theta(cfg, pm), cfg.n, cfg.reps, cfg.seed, estimator=cfg.estimator, plan=plan,
                      options=cfg.fit_options(), jobs=cfg.jobs)
    print(table.to_string(float_format=lambda v: f"{v:.4g}"))
    if cfg.out is not None:
        table.to_csv(cfg.out, index_label="parameter", float_format="%.17g")
    if table.attrs.get("failed"):
        logger.warning(f"{table.attrs['failed']} replication(s) failed")
    return EXIT_OK


def cmd_score_check(cfg: RunConfig) -> int:
    pm = _load_model(cfg)
    data = read_dataset(cfg.data)
    theta = _theta(cfg, pm) if cfg.theta is not None else starting_values(pm, data)
    rows = None if cfg.rows is None else list(range(min(cfg.rows, len(data))))
    report = score_check(pm, theta, data, tolerance=cfg.tol or 1e-5, rows=rows)
    print(report.summary().to_string(float_format=lambda v: f"{v:.3g}"))
    print(f"worst relative error: {report.worst:.3g} ({'pass' if report.passed else 'FAIL'})")
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_probability(cfg: RunConfig) -> int:
    pm = _load_model(cfg)
    if cfg.result is None or cfg.item is None:
        raise DataException("probability needs --result and --item")
    record = read_result(cfg.result)
    if tuple(record.get("names", ())) != pm.names:
        raise DataException(f"result file {cfg.result} does not belong to this model")
    theta = np.asarray(record["theta"], dtype=float)
    try:
        start, stop, num = cfg.eta_grid.split(":")
        grid = np.linspace(float(start), float(stop), int(num))
    except ValueError as e:
        error_msg = f"cannot read eta grid '{cfg.eta_grid}', expected start:stop:count"
        logger.error(f"CensLVM : {error_msg} : {e}")
        raise DataException(error_msg) from e
    if len(pm.spec.latent) != 1:
        raise ModelSpecificationException("probability curves need a model with exactly one latent variable")
    curve = pd.DataFrame({"eta": grid, "probability": probability_at(pm, theta, cfg.item, grid)})
    if cfg.out is None:
        curve.to_csv(sys.stdout, index=False, float_format="%.17g")
    else:
        write_dataset(curve, cfg.out)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "clfit": cmd_clfit, "simulate": cmd_simulate, "study": cmd_study,
            "score-check": cmd_score_check, "probability": cmd_probability}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="censlvm",
                                     description="Latent variable models for continuous, binary and censored data")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub, data=False):
        sub.add_argument("--model", metavar="FILENAME", required=True, help="model description file")
        if data:
            sub.add_argument("--data", metavar="FILENAME", required=True, help="CSV dataset")
        sub.add_argument("--out", metavar="FILENAME", default=None, help="output file")
        sub.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    def fitting(sub):
        sub.add_argument("--tol", metavar="NUMBER", type=float, default=None, help="score tolerance")
        sub.add_argument("--method", choices=["bhhh", "bfgs"], default="bhhh")

    def blocks(sub):
        sub.add_argument("--blocks", metavar="adjacent|pairs|FILENAME", default=ADJACENT,
                         help="block strategy, or a file with one block of names per line")
        sub.add_argument("--k", metavar="INTEGER", type=int, default=2, help="block size")

    fit = commands.add_parser("fit", help="maximum likelihood fit")
    common(fit, data=True)
    fitting(fit)

    clfit = commands.add_parser("clfit", help="composite likelihood fit")
    common(clfit, data=True)
    fitting(clfit)
    blocks(clfit)

    sim = commands.add_parser("simulate", help="simulate a dataset")
    common(sim)
    sim.add_argument("--seed", metavar="INTEGER", type=int, default=None)
    sim.add_argument("--n", metavar="INTEGER", type=int, default=500)
    sim.add_argument("--theta", metavar="FILENAME", default=None, help="JSON file of parameter values")
    sim.add_argument("--covariates", metavar="FILENAME", default=None, help="CSV of covariate values")

    study = commands.add_parser("study", help="Monte Carlo replication study")
    common(study)
    fitting(study)
    blocks(study)
    study.add_argument("--seed", metavar="INTEGER", type=int, default=None)
    study.add_argument("--n", metavar="INTEGER", type=int, default=500)
    study.add_argument("--reps", metavar="INTEGER", type=int, default=200)
    study.add_argument("--jobs", metavar="INTEGER", type=int, default=1)
    study.add_argument("--estimator", choices=[MLE, COMPOSITE], default=MLE)
    study.add_argument("--theta", metavar="FILENAME", default=None, help="JSON file of true parameter values")

    check = commands.add_parser("score-check", help="compare analytic and numerical scores")
    common(check, data=True)
    check.add_argument("--theta", metavar="FILENAME", default=None, help="JSON file of parameter values")
    check.add_argument("--tol", metavar="NUMBER", type=float, default=None, help="largest relative error")
    check.add_argument("--rows", metavar="INTEGER", type=int, default=None, help="audit only the first rows")

    probability = commands.add_parser("probability", help="P(item = 1) along a grid of latent values")
    common(probability)
    probability.add_argument("--result", metavar="FILENAME", required=True, help="JSON result of a fit")
    probability.add_argument("--item", metavar="NAME", required=True)
    probability.add_argument("--eta-grid", metavar="START:STOP:COUNT", default="-3:3:61")
    return parser


def _config(args: argparse.Namespace) -> RunConfig:
    values = {key: value for key, value in vars(args).items() if value is not None}
    blocks = values.get("blocks")
    if blocks is not None and blocks not in (ADJACENT, "pairs", ALL_PAIRS):
        values["blocks_file"] = blocks
        values["blocks"] = CUSTOM
    return RunConfig(**values)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
    except ValidationError as e:
        print(f"censlvm: invalid arguments: {e}", file=sys.stderr)
        return EXIT_SPECIFICATION
    missing = cfg.missing_paths()
    if missing:
        print(f"censlvm: file not found: {missing[0]}", file=sys.stderr)
        return EXIT_DATA
    try:
        return COMMANDS[cfg.command](cfg)
    except (ModelSyntaxException, ModelSpecificationException, ParameterMapException) as e:
        print(f"censlvm: model error: {e}", file=sys.stderr)
        return EXIT_SPECIFICATION
    except (DataException, FileNotFoundError) as e:
        print(f"censlvm: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NonIdentifiedException as e:
        print(f"censlvm: not identified: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    except CensLVMException as e:
        print(f"censlvm: estimation error: {e}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
