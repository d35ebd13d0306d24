import math
import os

import numpy as np
import pandas as pd
import pytest

from censlvm.exceptions import DataException, ParameterMapException
from censlvm.model import compile, implied_moments, parse_model
from censlvm.simulate import CensoringLaw, censor, default_values, dichotomize, simulate, theta_from_values
from censlvm.util import read_dataset, write_dataset

DESIGNS = os.path.join(os.path.dirname(__file__), "..", "designs")


def _design():
    with open(os.path.join(DESIGNS, "mixed_outcomes.lvm")) as f:
        return compile(parse_model(f.read()))


def test_same_seed_gives_identical_data(tmp_path):
    """
    Two runs with one seed give equal frames and byte-identical files.
    """
    pm = _design()
    theta = theta_from_values(pm)
    a = simulate(pm, theta, 200, seed=11)
    b = simulate(pm, theta, 200, seed=11)
    pd.testing.assert_frame_equal(a, b)
    write_dataset(a, tmp_path / "a.csv")
    write_dataset(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert not simulate(pm, theta, 200, seed=12).equals(a)


def test_column_layout():
    data = simulate(_design(), theta_from_values(_design()), 5, seed=0)
    assert list(data.columns) == ["Y1", "Y2", "Y3", "Y3_status", "X1", "X2"]
    assert set(data["Y2"].unique()) <= {0, 1}
    assert set(data["Y3_status"]) <= {"obs", "right"}


def test_written_data_reads_back(tmp_path):
    pm = _design()
    data = simulate(pm, theta_from_values(pm), 50, seed=3)
    write_dataset(data, tmp_path / "sim.csv")
    back = read_dataset(tmp_path / "sim.csv")
    np.testing.assert_array_equal(back["Y1"].to_numpy(), data["Y1"].to_numpy())
    assert list(back["Y3_status"]) == list(data["Y3_status"])


def test_binary_item_at_zero_intercept_is_balanced():
    pm = compile(parse_model("binary Y"))
    data = simulate(pm, theta_from_values(pm), 20000, seed=5)
    assert math.isclose(data["Y"].mean(), 0.5, abs_tol=0.015)


def test_declared_censoring_point_gives_expected_fraction():
    """
    Y* ~ N(0, 2) censored from the right at 1.5 leaves 1 - Phi(1.5 / sqrt 2) = 0.1444 at the bound.
    """
    pm = compile(parse_model("latent eta\ncensored right Y @1.5\nY <- eta"))
    data = simulate(pm, theta_from_values(pm), 20000, seed=6)
    fraction = (data["Y_status"] == "right").mean()
    assert math.isclose(fraction, 0.1444, abs_tol=0.01)
    assert data["Y"].max() == 1.5


def test_random_censoring_points():
    pm = compile(parse_model("censored left Y"))
    laws = {"Y": [CensoringLaw(side="left", bound=-0.5, scale=0.3)]}
    data = simulate(pm, theta_from_values(pm), 500, seed=7, censoring=laws)
    assert data["Y"][data["Y_status"] == "left"].nunique() > 1


def test_continuous_moments_match_the_model():
    pm = compile(parse_model("latent eta\nY1 <- eta\nY2 <- eta\nY3 <- eta"))
    theta = theta_from_values(pm, {"Y2<-eta": 0.5, "Y3<-eta": -0.8, "Y2": 1.0, "eta~~eta": 2.0})
    data = simulate(pm, theta, 40000, seed=8)
    ms = implied_moments(pm, theta, [])
    np.testing.assert_allclose(data[["Y1", "Y2", "Y3"]].mean().to_numpy(), ms.xi, atol=0.03)
    np.testing.assert_allclose(np.cov(data[["Y1", "Y2", "Y3"]].to_numpy().T), ms.omega, atol=0.08)


def test_given_covariates_are_used():
    pm = _design()
    covariates = pd.DataFrame({"X1": [0.0, 1.0, 2.0], "X2": [1.0, 1.0, 1.0]})
    data = simulate(pm, theta_from_values(pm), covariates=covariates, seed=1)
    np.testing.assert_array_equal(data["X1"].to_numpy(), covariates["X1"].to_numpy())
    with pytest.raises(DataException):
        simulate(pm, theta_from_values(pm), covariates=covariates.drop(columns=["X2"]), seed=1)


def test_default_and_given_values():
    pm = _design()
    natural = default_values(pm)
    assert natural[pm.index_of("Y2")] == 0.0
    assert natural[pm.index_of("Y2<-eta")] == 1.0
    theta = theta_from_values(pm, {"Y3~~Y3": 4.0})
    assert math.isclose(theta[pm.index_of("Y3~~Y3")], math.log(4.0))
    with pytest.raises(ParameterMapException):
        theta_from_values(pm, {"Y3~~Y3": -1.0})


def test_dichotomize_is_idempotent():
    data = pd.DataFrame({"Y": [-1.0, 0.5, 2.0, np.nan]})
    once = dichotomize(data, "Y", 0.0)
    assert once["Y"].tolist()[:3] == [0, 1, 1]
    assert once["Y"].isna().iloc[3]
    pd.testing.assert_frame_equal(dichotomize(once, "Y", 0.0), once)


def test_dichotomize_below_the_minimum_gives_ones():
    data = pd.DataFrame({"Y": [0.2, 0.5, 2.0]})
    assert dichotomize(data, "Y", -10.0)["Y"].tolist() == [1, 1, 1]


def test_censor_above_the_maximum_changes_nothing():
    data = pd.DataFrame({"Y": [0.2, 0.5, 2.0]})
    out = censor(data, "Y", "right", 10.0)
    np.testing.assert_array_equal(out["Y"].to_numpy(), data["Y"].to_numpy())
    assert out["Y_status"].tolist() == ["obs", "obs", "obs"]


def test_censor_from_both_sides():
    data = pd.DataFrame({"Y": [-3.0, 0.5, 2.0]})
    out = censor(censor(data, "Y", "left", -1.0), "Y", "right", 1.0)
    assert out["Y"].tolist() == [-1.0, 0.5, 1.0]
    assert out["Y_status"].tolist() == ["left", "obs", "right"]


def test_binary_column_cannot_be_censored():
    data = dichotomize(pd.DataFrame({"Y": [0.2, -0.5]}), "Y")
    with pytest.raises(DataException):
        censor(data, "Y", "left", 0.0)
    with pytest.raises(ValueError):
        censor(pd.DataFrame({"Y": [0.2]}), "Y", "up", 0.0)
