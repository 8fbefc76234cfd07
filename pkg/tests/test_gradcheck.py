import numpy as np
import pytest

from tapsed.gradcheck import SUITES, check_problem, run_suite
from tapsed.tensor import Tensor

QUICK = [n for n in SUITES if n != "model"]


@pytest.mark.parametrize("name", QUICK)
def test_suite_passes_on_two_seeds(name):
    r = run_suite(name, seeds=2)
    assert r.passed, f"{name}: {r.max_error:.3e} >= {r.tolerance:.0e}"


def wrong_square(x):
    def backward(g):
        return (g * x.data,)  # missing factor 2

    return Tensor._from_op(x.data ** 2, (x,), backward)


def test_checker_flags_a_wrong_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert check_problem([x], lambda: wrong_square(x), rng) > 0.3


def test_checker_accepts_a_right_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert check_problem([x], lambda: x * x, rng) < 1e-8


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("warp_drive")
