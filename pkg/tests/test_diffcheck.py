import time

import numpy as np
import pytest

from pcp.diffcheck import GradCheckConfig, NonFiniteLoss, finite_diff, grad_check, relative_error
from pcp.network import ParamSet


def _params(theta):
    return ParamSet({"W1": theta[:4].reshape(2, 2), "W2": theta[4:6].reshape(2, 1), "Wc": theta[6:].reshape(1, 1)})


def test_quadratic_gradient():
    theta = np.linspace(-1.5, 2.0, 7)
    g = finite_diff(lambda p: float(np.sum(p.flat() ** 2)), _params(theta), 1e-6)
    np.testing.assert_allclose(g, 2 * theta, atol=1e-8)


def test_constant_gradient():
    g = finite_diff(lambda p: 3.0, _params(np.ones(7)), 1e-5)
    assert np.all(g == 0.0)


def test_step_range_and_nonfinite():
    with pytest.raises(ValueError):
        finite_diff(lambda p: 0.0, _params(np.ones(7)), 1e-2)
    with pytest.raises(NonFiniteLoss):
        finite_diff(lambda p: float("nan"), _params(np.ones(7)), 1e-6)


def test_relative_error_floor():
    assert relative_error([0.0], [0.0])[0] == 0.0
    assert relative_error([1.0], [1.1])[0] == pytest.approx(0.1 / 1.1)


def test_default_check_passes():
    start = time.perf_counter()
    report = grad_check(GradCheckConfig(), seed=0)
    assert report.passed and report.global_max < 1e-5
    assert time.perf_counter() - start < 10
    assert set(report.block_max) == {"ext0.weight", "ext0.bias", "ext1.weight", "ext1.bias", "W1", "W2", "Wc"}


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_other_seeds_pass(seed):
    assert grad_check(GradCheckConfig(), seed=seed).passed


def test_beta_zero_refinement_path_is_zero():
    report = grad_check(GradCheckConfig(beta=0.0), seed=0)
    assert report.passed
    assert report.refine_path_grad_max == 0.0


def test_large_entropy_weight_still_passes():
    report = grad_check(GradCheckConfig(lambda_ent=10.0), seed=0)
    assert report.passed
    assert report.loss["lambda_ent"] == 10.0


def test_wrong_sign_fault_is_caught():
    report = grad_check(GradCheckConfig(), seed=0, fault="Wc")
    assert not report.passed
    assert report.block_max["Wc"] > 0.5


def test_report_json():
    text = grad_check(GradCheckConfig(), seed=0).to_json()
    assert text.endswith("\n") and '"global_max"' in text
