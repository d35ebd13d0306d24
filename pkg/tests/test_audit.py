import numpy as np
import pytest

import censlvm.audit
from censlvm.audit import relative_error, score_check
from censlvm.likelihood import evaluate
from censlvm.model import compile, parse_model
from censlvm.simulate import simulate, theta_from_values

MODEL = """
latent eta
binary Y2
censored left Y3 @-0.5
Y1 <- eta
Y2 <- eta
Y3 <- eta
eta <- X
"""


@pytest.fixture
def audit_case():
    pm = compile(parse_model(MODEL))
    theta = theta_from_values(pm, {"Y2<-eta": 0.7, "Y3": 0.2, "eta<-X": -0.4})
    data = simulate(pm, theta, 30, seed=4)
    return pm, theta, data


def test_analytic_scores_pass_the_audit(audit_case):
    pm, theta, data = audit_case
    report = score_check(pm, theta, data)
    assert report.passed
    assert report.worst < 1e-6
    assert report.analytic.shape == (30, pm.d)
    assert list(report.summary().index) == list(pm.names)


def test_audit_of_selected_rows(audit_case):
    pm, theta, data = audit_case
    report = score_check(pm, theta, data, rows=[0, 5, 9])
    assert report.rows == (0, 5, 9)
    assert report.analytic.shape == (3, pm.d)


def test_corrupted_score_fails_the_audit(audit_case, monkeypatch):
    """
    A score scaled by 1.01 must be caught.
    """
    pm, theta, data = audit_case

    def corrupted(*args, **kwargs):
        rows, scores = evaluate(*args, **kwargs)
        return rows, None if scores is None else 1.01 * scores

    monkeypatch.setattr(censlvm.audit, "evaluate", corrupted)
    report = score_check(pm, theta, data)
    assert not report.passed
    assert report.worst > 1e-3


def test_relative_error_scale():
    np.testing.assert_allclose(relative_error(np.array([1.0, 200.0]), np.array([1.5, 100.0])), [0.5, 1.0])
