import json
import os

import numpy as np
import pytest

from censlvm.complik import build_blocks
from censlvm.model import compile, parse_model
from censlvm.simulate import theta_from_values
from censlvm.study import COMPOSITE, STUDY_COLUMNS, replicate, replication_seeds

DESIGNS = os.path.join(os.path.dirname(__file__), "..", "designs")
SLOW = os.environ.get("CENSLVM_SLOW_TESTS") == "1"

PROBIT = "binary Y\nY <- X"


def test_replication_seeds_are_reproducible_and_distinct():
    a = replication_seeds(42, 20)
    assert np.array_equal(a, replication_seeds(42, 20))
    assert len(set(a.tolist())) == 20
    assert not np.array_equal(a, replication_seeds(43, 20))


def test_single_replication_has_no_spread():
    pm = compile(parse_model(PROBIT))
    table = replicate(pm, theta_from_values(pm), 300, 1, seed=1)
    assert list(table.columns) == STUDY_COLUMNS
    assert list(table.index) == list(pm.names)
    assert table["sd"].isna().all()
    assert table["se_ratio"].isna().all()
    assert np.all(np.isfinite(table["mean"]))
    assert table.attrs["failed"] == 0


def test_small_study_summaries():
    pm = compile(parse_model(PROBIT))
    truth = theta_from_values(pm, {"Y<-X": -0.5})
    table = replicate(pm, truth, 400, 8, seed=3)
    assert table.loc["Y<-X", "truth"] == -0.5
    assert table.loc["Y", "truth"] == 0.0
    np.testing.assert_allclose(table["bias"], table["mean"] - table["truth"])
    np.testing.assert_allclose(table["mse"], table["bias"] ** 2 + table["variance"] * 7 / 8, rtol=1e-10)
    assert np.all(np.abs(table["bias"]) < 0.2)
    assert table.attrs["replications"] == 8


def test_study_is_reproducible():
    pm = compile(parse_model(PROBIT))
    theta = theta_from_values(pm)
    a = replicate(pm, theta, 200, 3, seed=9)
    b = replicate(pm, theta, 200, 3, seed=9)
    np.testing.assert_array_equal(a.to_numpy(), b.to_numpy())


def test_composite_study_needs_blocks():
    pm = compile(parse_model(PROBIT))
    with pytest.raises(ValueError):
        replicate(pm, theta_from_values(pm), 100, 1, seed=1, estimator=COMPOSITE)
    table = replicate(pm, theta_from_values(pm), 200, 2, seed=1, estimator=COMPOSITE,
                      plan=build_blocks(pm.spec, k=1))
    assert np.all(np.isfinite(table["mean"]))


@pytest.mark.skipif(not SLOW, reason="set CENSLVM_SLOW_TESTS=1 to run Monte Carlo checks")
def test_standard_errors_match_monte_carlo_spread():
    """
    Binary outcome on a measured latent, 200 replications of n = 500: the
    effect of eta has variance near 0.0128 and a small upward bias, and
    Ave(SE)/SD is close to one for the intercept and both effects.
    """
    with open(os.path.join(DESIGNS, "probit_measurement.lvm")) as f:
        pm = compile(parse_model(f.read()))
    with open(os.path.join(DESIGNS, "probit_measurement_truth.json")) as f:
        truth = theta_from_values(pm, json.load(f))
    table = replicate(pm, truth, 500, 200, seed=2024, jobs=4)
    assert table.attrs["failed"] <= 4
    assert 0.009 <= table.loc["Y<-eta", "variance"] <= 0.017
    assert 0.004 <= table.loc["Y<-eta", "bias"] <= 0.036
    assert abs(table.loc["Y<-X", "bias"] + 0.009) <= 0.013
    ratios = table.loc[["Y", "Y<-eta", "Y<-X"], "se_ratio"]
    assert np.all((ratios >= 0.92) & (ratios <= 1.08))
