import numpy as np
import pytest

from ogpo import checks
from ogpo.numeric import Tape, ad


def test_fd_check_flags_wrong_gradient():
    p = {"x": np.array([0.3, -0.7])}

    def good(tape=None):
        x = tape.watch(p)["x"] if tape else p["x"]
        return ad.sum_(ad.tanh(x) * x)

    err, gn = checks.fd_check(good, p)
    assert err < 1e-8 and gn > 0

    def wrong(tape=None):
        x = tape.watch(p)["x"] if tape else p["x"]
        return ad.sum_(ad.stop_gradient(ad.tanh(x)) * x) if tape else ad.sum_(ad.tanh(x) * x)

    assert checks.fd_check(wrong, p)[0] > 1e-2


@pytest.mark.parametrize("head", sorted(checks.GRADIENT_HEADS))
def test_gradient_heads_at_two_points(head):
    (res,) = checks.gradcheck(points=2, heads=[head])
    assert res.passed, res.line()


def test_td_chain_truth():
    assert np.allclose(checks.td_chain_values(0.9), [-2.71, -1.9, -1.0])


def test_small_marginal_check_distinguishes_correction():
    res = checks.marginal_check(n=20_000, K=64, sigma=0.05)
    assert res.detail["corrected_z_var"] < 3 < res.detail["uncorrected_z_var"]


def test_chi2_expectation_small():
    res = checks.chi2_check(n=200_000, shift=0.01, sigma=0.02)
    assert res.passed and res.detail["expected"] == pytest.approx(np.exp(0.25))


def test_check_result_line():
    line = checks.CheckResult("x", False, {"a": 0.5}, 1.25).line()
    assert line.startswith("FAIL x") and "a=0.5" in line
