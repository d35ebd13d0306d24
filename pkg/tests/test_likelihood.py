import itertools
import math
import os

import numpy as np
import pandas as pd
import pytest
from scipy import integrate
from scipy.special import ndtr
from scipy.stats import norm

from censlvm.audit import score_check
import censlvm.likelihood
from censlvm import mvn
from censlvm.exceptions import CovarianceException, DataException, DegeneratePatternException
from censlvm.likelihood import ObservationPattern, classify_pattern, conditional_moments, evaluate, loglik, \
    loglik_obs, prepare_data, score, score_obs
from censlvm.model import MomentSystem, compile, implied_moments, parse_model
from censlvm.mvn import GaussianMoments, Integrator, mvn_cdf
from censlvm.simulate import simulate, theta_from_values
from censlvm.util import read_dataset

DESIGNS = os.path.join(os.path.dirname(__file__), "..", "designs")
DATA = os.path.join(os.path.dirname(__file__), "data")
SLOW = os.environ.get("CENSLVM_SLOW_TESTS") == "1"

MIXED_WITH_SLOPE = """
latent eta
binary Y2
censored right Y3 @1.0
censored left Y4 @-0.5
Y1 <- eta
Y2 <- eta
Y3 <- eta
Y4 <- eta
eta <- X1
slope Y3 <- eta * X2
cov(Y1, Y3)
"""


def _mixed_outcomes():
    with open(os.path.join(DESIGNS, "mixed_outcomes.lvm")) as f:
        return compile(parse_model(f.read()))


def _theta(pm, values):
    return theta_from_values(pm, values)


def test_continuous_row_is_gaussian_density():
    """
    Univariate standard normal at zero.
    """
    pm = compile(parse_model("cov(Y, Y) @1\nY <- 1 @0"))
    assert pm.d == 0
    assert math.isclose(loglik_obs(pm, np.zeros(0), {"Y": 0.0}), -0.9189385332046727, rel_tol=1e-12)


def test_probit_row():
    """
    A binary item with intercept nu: P(Y=1) = Phi(nu), score phi(nu)/Phi(nu).
    """
    pm = compile(parse_model("binary Y"))
    assert pm.names == ("Y",)
    assert math.isclose(loglik_obs(pm, np.zeros(1), {"Y": 1}), math.log(0.5), rel_tol=1e-14)
    assert math.isclose(loglik_obs(pm, np.zeros(1), {"Y": 0}), math.log(0.5), rel_tol=1e-14)
    assert math.isclose(score_obs(pm, np.zeros(1), {"Y": 1})[0], 0.7978845608028654, rel_tol=1e-12)
    assert math.isclose(score_obs(pm, np.zeros(1), {"Y": 0})[0], -0.7978845608028654, rel_tol=1e-12)
    assert math.isclose(loglik_obs(pm, np.array([0.3]), {"Y": 1}), math.log(ndtr(0.3)), rel_tol=1e-13)


def test_tobit_rows():
    """
    A right-censored row contributes log(1 - Phi((c - mu) / sigma)).
    """
    pm = compile(parse_model("censored right Y"))
    assert math.isclose(loglik_obs(pm, np.zeros(2), {"Y": 0.0, "Y_status": "right"}), math.log(0.5),
                        rel_tol=1e-14)
    theta = pm.internal(np.array([0.3, 2.0]))
    expected = math.log(1.0 - ndtr((1.0 - 0.3) / math.sqrt(2.0)))
    assert math.isclose(loglik_obs(pm, theta, {"Y": 1.0, "Y_status": "right"}), expected, rel_tol=1e-12)
    uncensored = loglik_obs(pm, theta, {"Y": 1.0, "Y_status": "obs"})
    assert math.isclose(uncensored, norm.logpdf(1.0, 0.3, math.sqrt(2.0)), rel_tol=1e-12)


def test_classify_pattern():
    """
    Binary ones and right flags go right, binary zeros go left, empty cells are missing.
    """
    spec = _mixed_outcomes().spec
    pattern = classify_pattern({"Y1": 0.5, "Y2": 1, "Y3": 1.5, "Y3_status": "right", "X1": 0.0, "X2": 0.0}, spec)
    assert pattern.observed_idx == (0,)
    assert pattern.right_idx == (1, 2)
    assert pattern.right_bounds == (0.0, 1.5)
    np.testing.assert_array_equal(pattern.L, np.diag([1.0, 1.0]))

    pattern = classify_pattern({"Y1": np.nan, "Y2": 0, "Y3": 0.2, "Y3_status": "obs", "X1": 0.0, "X2": 0.0}, spec)
    assert pattern.left_idx == (1,)
    assert pattern.left_bounds == (0.0,)
    assert pattern.missing_idx == (0,)
    assert pattern.observed_idx == (2,)
    np.testing.assert_array_equal(pattern.L, np.diag([-1.0]))


def test_status_flag_on_continuous_variable_is_refused():
    spec = _mixed_outcomes().spec
    with pytest.raises(DataException):
        classify_pattern({"Y1": 0.5, "Y1_status": "right", "Y2": 1, "Y3": 0.1, "X1": 0.0, "X2": 0.0}, spec)


def test_left_flag_on_right_censored_variable_is_refused():
    spec = _mixed_outcomes().spec
    with pytest.raises(DataException):
        classify_pattern({"Y1": 0.5, "Y2": 1, "Y3": 0.1, "Y3_status": "left", "X1": 0.0, "X2": 0.0}, spec)


def test_conditional_moments_schur_complement():
    """
    Omega = [[2, 1], [1, 2]], xi = 0 and y1 = 1 give mu = 0.5 and sigma = 1.5.
    """
    ms = MomentSystem(xi=np.zeros(2), omega=np.array([[2.0, 1.0], [1.0, 2.0]]), dxi=np.zeros((2, 1)),
                      domega=np.zeros((4, 1)))
    pattern = ObservationPattern(observed_idx=(0,), right_idx=(1,), left_idx=(), missing_idx=(),
                                 right_bounds=(0.0,), left_bounds=())
    moments = conditional_moments(ms, pattern, np.array([1.0, 0.0]))
    assert math.isclose(moments.mu[0], 0.5)
    assert math.isclose(moments.sigma[0, 0], 1.5)

    unconditional = ObservationPattern(observed_idx=(), right_idx=(0, 1), left_idx=(), missing_idx=(),
                                       right_bounds=(0.0, 0.0), left_bounds=())
    moments = conditional_moments(ms, unconditional, np.array([0.0, 0.0]))
    np.testing.assert_allclose(moments.sigma, ms.omega)


def test_conditional_moment_derivatives_match_finite_differences():
    pm = _mixed_outcomes()
    theta = _theta(pm, {"Y2<-eta": 0.8, "Y3<-eta": 1.2, "eta<-X1": 0.5, "Y3~~Y3": 0.7})
    pattern = ObservationPattern(observed_idx=(0,), right_idx=(2,), left_idx=(1,), missing_idx=(),
                                 right_bounds=(1.5,), left_bounds=(0.0,))
    row = np.array([0.4, 0.0, 1.5])
    x = [0.3, -0.2]
    moments = conditional_moments(implied_moments(pm, theta, x), pattern, row)
    h = 1e-6
    for t in range(pm.d):
        up, down = theta.copy(), theta.copy()
        up[t] += h
        down[t] -= h
        plus = conditional_moments(implied_moments(pm, up, x), pattern, row)
        minus = conditional_moments(implied_moments(pm, down, x), pattern, row)
        np.testing.assert_allclose(moments.dmu[:, t], (plus.mu - minus.mu) / (2 * h), atol=1e-6)
        np.testing.assert_allclose(moments.dsigma[:, t], ((plus.sigma - minus.sigma) / (2 * h)).ravel(), atol=1e-6)


def _one_factor_binary(p: int):
    items = [f"Y{j}" for j in range(1, p + 1)]
    text = "latent eta\nbinary " + " ".join(items) + "\n" + "\n".join(f"{y} <- eta" for y in items)
    return items, compile(parse_model(text))


def _pattern_total(p: int, seed: int) -> float:
    items, pm = _one_factor_binary(p)
    rng = np.random.default_rng(seed)
    theta = rng.normal(scale=0.4, size=pm.d)
    patterns = pd.DataFrame(list(itertools.product((0, 1), repeat=p)), columns=items)
    return float(np.exp(evaluate(pm, theta, patterns, want_score=False)[0]).sum())


@pytest.mark.parametrize("seed", range(10))
def test_three_item_binary_patterns_sum_to_one(seed):
    """
    Summing the probabilities of every response pattern of an all-binary model gives 1.
    """
    assert math.isclose(_pattern_total(3, seed), 1.0, abs_tol=1e-8)


def test_four_item_binary_patterns_sum_to_one():
    assert math.isclose(_pattern_total(4, 4), 1.0, abs_tol=1e-8)


@pytest.mark.skipif(not SLOW, reason="set CENSLVM_SLOW_TESTS=1 to run Monte Carlo checks")
@pytest.mark.parametrize("seed", range(10))
def test_four_item_binary_patterns_sum_to_one_at_random_parameters(seed):
    assert math.isclose(_pattern_total(4, 100 + seed), 1.0, abs_tol=1e-8)


def test_marginalizing_the_latent_variable_by_quadrature():
    """
    Given eta the items are independent, so the row likelihood is a
    one-dimensional integral over eta.
    """
    pm = compile(parse_model("latent eta\nbinary Y2\ncensored right Y3\nY1 <- eta\nY2 <- eta\nY3 <- eta"))
    values = {"Y2<-eta": 0.7, "Y3<-eta": 1.3, "Y2": -0.2, "Y3": 0.4, "eta": 0.1, "Y1~~Y1": 0.8,
              "Y3~~Y3": 0.6, "eta~~eta": 1.4}
    theta = _theta(pm, values)
    rows = [{"Y1": 0.4, "Y2": 1, "Y3": 1.2, "Y3_status": "right"},
            {"Y1": -0.9, "Y2": 0, "Y3": 0.3, "Y3_status": "obs"},
            {"Y1": 1.6, "Y2": 0, "Y3": 2.0, "Y3_status": "right"}]
    for row in rows:
        def integrand(eta):
            f = norm.pdf(row["Y1"], eta, math.sqrt(values["Y1~~Y1"]))
            p2 = ndtr(values["Y2"] + values["Y2<-eta"] * eta)
            f *= p2 if row["Y2"] == 1 else 1.0 - p2
            mean3 = values["Y3"] + values["Y3<-eta"] * eta
            if row["Y3_status"] == "right":
                f *= 1.0 - ndtr((row["Y3"] - mean3) / math.sqrt(values["Y3~~Y3"]))
            else:
                f *= norm.pdf(row["Y3"], mean3, math.sqrt(values["Y3~~Y3"]))
            return f * norm.pdf(eta, values["eta"], math.sqrt(values["eta~~eta"]))

        oracle = math.log(integrate.quad(integrand, -15, 15, epsabs=1e-14, epsrel=1e-12, limit=200)[0])
        assert math.isclose(loglik_obs(pm, theta, row), oracle, abs_tol=1e-7)


def test_missing_component_matches_model_without_it():
    """
    A row with Y3 missing has the likelihood of the model that never had Y3.
    """
    full = _mixed_outcomes()
    reduced = compile(parse_model("latent eta\nbinary Y2\nY1 <- eta\nY2 <- eta\neta <- X1\neta <- X2"))
    values = {"Y2<-eta": 0.9, "eta<-X1": 0.6, "eta<-X2": -0.4, "Y2": 0.2, "eta": 0.1, "Y1~~Y1": 1.3,
              "eta~~eta": 0.8}
    row = {"Y1": 0.7, "Y2": 1, "Y3": np.nan, "X1": 0.5, "X2": -1.0}
    assert math.isclose(loglik_obs(full, _theta(full, values), row),
                        loglik_obs(reduced, _theta(reduced, values), row), rel_tol=1e-13)


def test_reflecting_a_left_censored_variable():
    """
    Negating data, intercept and slope of a left-censored variable and
    declaring it right-censored leaves the likelihood unchanged.
    """
    left = compile(parse_model("censored left Y\nY <- X"))
    right = compile(parse_model("censored right Y\nY <- X"))
    theta_left = _theta(left, {"Y<-X": 0.7, "Y": -0.3, "Y~~Y": 1.6})
    theta_right = _theta(right, {"Y<-X": -0.7, "Y": 0.3, "Y~~Y": 1.6})
    for value, flag, x in ((0.2, "left", 0.4), (1.1, "obs", -0.8)):
        a = loglik_obs(left, theta_left, {"Y": value, "Y_status": flag, "X": x})
        b = loglik_obs(right, theta_right, {"Y": -value, "Y_status": "right" if flag == "left" else flag, "X": x})
        assert math.isclose(a, b, abs_tol=1e-12)


def test_right_censored_block_equals_negated_orthant():
    """
    Two right-censored coordinates: Phi with mean -mu at -y0.
    """
    pm = compile(parse_model("censored right Y1 Y2\ncov(Y1, Y2)"))
    values = {"Y1": 0.2, "Y2": -0.1, "Y1~~Y1": 1.1, "Y2~~Y2": 0.9, "Y1~~Y2": 0.4}
    theta = _theta(pm, values)
    bounds = np.array([0.5, -0.3])
    g = GaussianMoments(-np.array([0.2, -0.1]), np.array([[1.1, 0.4], [0.4, 0.9]]))
    expected = math.log(mvn_cdf(-bounds, g)[0])
    row = {"Y1": 0.5, "Y1_status": "right", "Y2": -0.3, "Y2_status": "right"}
    assert math.isclose(loglik_obs(pm, theta, row), expected, rel_tol=1e-12)


def test_score_matches_finite_differences_on_mixed_rows():
    """
    Continuous, binary, left, right and missing components with a random slope.
    """
    pm = compile(parse_model(MIXED_WITH_SLOPE))
    truth = _theta(pm, {"Y1~~Y3": 0.3})
    data = simulate(pm, truth, 40, seed=11)
    data.loc[[3, 17], "Y1"] = np.nan
    data.loc[[5, 21], "Y3"] = np.nan
    data.loc[[8], "Y2"] = pd.NA
    theta = _theta(pm, {"Y2<-eta": 0.8, "Y3<-eta": 1.2, "Y4<-eta": 0.9, "eta<-X1": 0.4,
                        "Y3<-eta*X2": 0.3, "Y1~~Y3": 0.2, "Y2": 0.1, "Y4~~Y4": 1.3})
    report = score_check(pm, theta, data)
    assert report.passed, report.summary()
    assert report.worst < 1e-5


def test_dataset_totals():
    """
    Totals are sums of row contributions, and a duplicated dataset doubles them.
    """
    pm = _mixed_outcomes()
    data = read_dataset(os.path.join(DATA, "mixed_rows.csv"))
    theta = _theta(pm, {"Y2<-eta": 0.8, "eta<-X1": 0.5})
    rows, scores = evaluate(pm, theta, data)
    assert math.isclose(loglik(pm, theta, data), float(np.sum(rows)), rel_tol=1e-14)
    single = loglik_obs(pm, theta, data.iloc[1])
    assert math.isclose(rows[1], single, rel_tol=1e-13)
    doubled = pd.concat([data, data], ignore_index=True)
    assert math.isclose(loglik(pm, theta, doubled), 2 * loglik(pm, theta, data), rel_tol=1e-12)
    np.testing.assert_allclose(score(pm, theta, doubled), 2 * score(pm, theta, data), rtol=1e-12, atol=1e-12)


def test_row_order_does_not_matter():
    pm = _mixed_outcomes()
    data = read_dataset(os.path.join(DATA, "mixed_rows.csv"))
    theta = _theta(pm, {"Y3<-eta": 1.1})
    shuffled = data.iloc[::-1].reset_index(drop=True)
    assert math.isclose(loglik(pm, theta, data), loglik(pm, theta, shuffled), rel_tol=1e-10)


def test_all_missing_row_is_skipped():
    pm = _mixed_outcomes()
    data = read_dataset(os.path.join(DATA, "mixed_rows.csv"))
    theta = _theta(pm, {})
    empty = pd.DataFrame([{"Y1": np.nan, "Y2": np.nan, "Y3": np.nan, "Y3_status": np.nan, "X1": 0.0, "X2": 0.0}])
    extended = pd.concat([data, empty], ignore_index=True)
    assert math.isclose(loglik(pm, theta, extended), loglik(pm, theta, data), rel_tol=1e-14)
    with pytest.raises(DataException):
        loglik_obs(pm, theta, empty.iloc[0])


def test_underflowed_pattern_names_the_row():
    pm = compile(parse_model("censored right Y"))
    data = pd.DataFrame({"Y": [0.1, 50.0], "Y_status": ["obs", "right"]})
    with pytest.raises(DegeneratePatternException) as info:
        loglik(pm, np.zeros(2), data)
    assert info.value.row == 1


def test_binary_values_must_be_zero_or_one():
    pm = compile(parse_model("binary Y"))
    with pytest.raises(DataException):
        prepare_data(pm.spec, pd.DataFrame({"Y": [0, 1, 2]}))


def test_nullable_integer_columns_with_missing_cells():
    """
    Dichotomized columns are nullable integers; pd.NA reads as a missing cell.
    """
    pm = compile(parse_model("latent eta\nbinary Y2\nY1 <- eta\nY2 <- eta"))
    data = pd.DataFrame({"Y1": pd.array([2, pd.NA, 1], dtype="Int64"),
                         "Y2": pd.array([1, 0, pd.NA], dtype="Int64")})
    prepared = prepare_data(pm.spec, data)
    np.testing.assert_array_equal(prepared.status, [[0, 1], [3, 2], [0, 3]])
    assert np.isnan(prepared.values[1, 0])
    assert prepared.values[2, 0] == 1.0


def test_nullable_integer_covariate_with_missing_cell_is_refused():
    pm = compile(parse_model("binary Y\nY <- X"))
    data = pd.DataFrame({"Y": [1, 0], "X": pd.array([3, pd.NA], dtype="Int64")})
    with pytest.raises(DataException, match="row 1"):
        prepare_data(pm.spec, data)


def test_rows_sharing_a_pattern_share_one_cdf_evaluation(monkeypatch):
    """
    Four binary items without covariates have at most 16 distinct rows, however long the dataset.
    """
    items, pm = _one_factor_binary(4)
    theta = theta_from_values(pm, {"Y2<-eta": 0.7, "Y3<-eta": 1.2, "Y4<-eta": 0.9, "Y3": -0.3})
    data = simulate(pm, theta, 300, seed=8)
    calls = []
    original = mvn.cdf_moment_gradient

    def counted(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    monkeypatch.setattr(mvn, "cdf_moment_gradient", counted)
    rows, scores = evaluate(pm, theta, data)
    distinct = data[items].drop_duplicates()
    assert len(calls) <= len(distinct) <= 16

    first = data[items].duplicated(keep=False).to_numpy().nonzero()[0]
    twin = [r for r in first if (data.loc[r, items] == data.loc[first[0], items]).all()]
    assert len(twin) > 1
    assert np.all(rows[twin] == rows[twin[0]])
    assert np.all(scores[twin] == scores[twin[0]])

    single = evaluate(pm, theta, data.iloc[[twin[0]]].reset_index(drop=True))
    assert math.isclose(rows[twin[0]], single[0][0], rel_tol=1e-13)
    np.testing.assert_allclose(scores[twin[0]], single[1][0], rtol=1e-10, atol=1e-13)


def test_failure_in_the_censored_block_names_the_exact_row(monkeypatch):
    pm = compile(parse_model("censored right Y1 Y2\ncov(Y1, Y2)"))
    data = pd.DataFrame({"Y1": [0.5, 0.7, 2.5, 0.1], "Y1_status": ["right"] * 4,
                         "Y2": [0.2, 0.3, 0.4, 0.6], "Y2_status": ["right"] * 4})
    theta = _theta(pm, {"Y1~~Y2": 0.3})
    original = mvn.cdf_moment_gradient

    def failing(y, g, integrator=mvn.DEFAULT_INTEGRATOR):
        if y[0] == -2.5:
            raise CovarianceException("conditional covariance is not usable")
        return original(y, g, integrator)

    monkeypatch.setattr(mvn, "cdf_moment_gradient", failing)
    with pytest.raises(CovarianceException) as info:
        evaluate(pm, theta, data)
    assert "row 2:" in str(info.value)


def test_failure_in_the_observed_block_names_the_exact_row(monkeypatch):
    pm = _mixed_outcomes()
    data = pd.DataFrame({"Y1": [0.3, -0.2, 7.0, 1.1], "Y2": [1, 1, 1, 1], "Y3": [0.4, 1.0, -0.3, 0.8],
                         "Y3_status": ["obs"] * 4, "X1": [0.1, 0.5, -0.4, 0.0], "X2": [1.0, 0.0, 0.2, -0.6]})
    original = censlvm.likelihood._conditional_block

    def failing(xi, dxi, omega, domega, values, obs, cens, want_score):
        if np.any(values[:, 0] == 7.0):
            raise CovarianceException("covariance of the observed block is not positive definite")
        return original(xi, dxi, omega, domega, values, obs, cens, want_score)

    monkeypatch.setattr(censlvm.likelihood, "_conditional_block", failing)
    with pytest.raises(CovarianceException) as info:
        evaluate(pm, _theta(pm, {}), data)
    assert "row 2:" in str(info.value)


_KINDS = ("continuous", "binary", "left", "right")


def _random_model(rng: np.random.Generator) -> str:
    kinds = ["continuous"] + list(rng.choice(_KINDS, size=3))
    if kinds.count("continuous") == 1:
        kinds[int(rng.integers(1, 4))] = "continuous"
    lines = ["latent eta"]
    for j, kind in enumerate(kinds[1:], start=2):
        if kind == "binary":
            lines.append(f"binary Y{j}")
        elif kind != "continuous":
            lines.append(f"censored {kind} Y{j} @{rng.uniform(-0.5, 1.0):.2f}")
    lines += [f"Y{j} <- eta" for j in range(1, 5)]
    lines.append("eta <- X1")
    if rng.random() < 0.5:
        lines.append(f"slope Y{int(rng.integers(2, 5))} <- eta * X2")
    return "\n".join(lines)


def _random_audit(seed: int, n: int, integrator: Integrator = mvn.DEFAULT_INTEGRATOR):
    rng = np.random.default_rng(seed)
    pm = compile(parse_model(_random_model(rng)))
    truth = theta_from_values(pm)
    data = simulate(pm, truth, n, seed=seed)
    for name in ("Y2", "Y3", "Y4"):
        data.loc[rng.random(n) < 0.1, name] = np.nan
    theta = truth + rng.normal(scale=0.2, size=pm.d)
    return score_check(pm, theta, data, integrator=integrator)


@pytest.mark.parametrize("seed", range(5))
def test_score_matches_finite_differences_on_random_models(seed):
    """
    Random mixes of continuous, binary, left- and right-censored items, with
    missing cells and sometimes a random slope.
    """
    report = _random_audit(seed, 25)
    assert report.worst < 1e-5, report.summary()


@pytest.mark.skipif(not SLOW, reason="set CENSLVM_SLOW_TESTS=1 to run Monte Carlo checks")
@pytest.mark.parametrize("seed", range(5, 25))
def test_score_matches_finite_differences_on_more_random_models(seed):
    report = _random_audit(seed, 60)
    assert report.worst < 1e-5, report.summary()


@pytest.mark.skipif(not SLOW, reason="set CENSLVM_SLOW_TESTS=1 to run Monte Carlo checks")
def test_score_matches_finite_differences_with_five_binary_items():
    """
    Five censored coordinates go through the lattice rule.
    """
    _, pm = _one_factor_binary(5)
    theta = theta_from_values(pm, {"Y2<-eta": 0.8, "Y3<-eta": 1.1, "Y4<-eta": 0.9, "Y5<-eta": 1.2, "Y4": 0.3})
    data = simulate(pm, theta, 40, seed=12)
    report = score_check(pm, theta, data, rows=[0, 1, 2, 3],
                         integrator=Integrator(abs_tol=1e-8, max_points=2 ** 22))
    assert report.worst < 1e-5, report.summary()
