import math

import numpy as np
import pytest
import torch

from hfsda.errors import DimensionError, OracleError
from hfsda.testkit import (GradCheckSpec, bruteforce_eq1, fa_hand, finite_diff_grad,
                           gradcheck_module, measured_snr_db, relative_error, seed_everything)


def test_finite_diff_on_polynomial():
    g = finite_diff_grad(lambda x: float(x[0] ** 3 + 2 * x[0] * x[1]), [1.0, 2.0])
    # central differences are exact for cubics up to the h^2 f''' / 6 term
    np.testing.assert_allclose(g, [3 + 4 + 1e-6, 2.0], atol=1e-9)


def test_finite_diff_non_finite():
    with pytest.raises(OracleError):
        finite_diff_grad(lambda x: math.inf, [0.0])


def test_relative_error():
    assert relative_error([0, 0], [0, 0]) == 0.0
    assert relative_error([1, 0], [0, 0]) == 1.0


def test_gradcheck_catches_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x           # wrong: should be 2x

    lin = torch.nn.Linear(3, 3).double()
    x = torch.randn(4, 3, dtype=torch.float64)
    good = gradcheck_module(lin, lambda: (lin(x) ** 2).sum())
    bad = gradcheck_module(lin, lambda: Bad.apply(lin(x)).sum())
    assert max(good.values()) < 1e-6
    assert max(bad.values()) > 0.1


def test_gradcheck_select():
    lin = torch.nn.Linear(2, 2).double()
    x = torch.randn(3, 2, dtype=torch.float64)
    errs = gradcheck_module(lin, lambda: lin(x).pow(2).sum(), GradCheckSpec(select=lambda n: n == "bias"))
    assert set(errs) == {"bias"}


def test_spec_validation():
    with pytest.raises(ValueError):
        GradCheckSpec(step=0)


def test_bruteforce_known_value():
    # one kernel, all-ones attention, 1x1 kernel of value 2 -> doubles the input
    x = np.arange(6.0).reshape(1, 2, 3)
    out = bruteforce_eq1(np.full((1, 1, 1, 1, 1), 2.0), [[1.0]], [[1.0]], [[1.0]], [1.0], x)
    np.testing.assert_array_equal(out, 2 * x)


def test_bruteforce_attention_scales():
    x = np.ones((1, 3, 3))
    k = np.ones((2, 1, 1, 3, 3))
    out = bruteforce_eq1(k, np.ones((2, 3)) * 0.5, np.ones((2, 3)), np.ones((2, 1)), [0.25, 0.75], x)
    # centre sees all 9 taps: 9 * 0.5 * (0.25 + 0.75)
    assert out[0, 1, 1] == 4.5
    assert out[0, 0, 0] == 2.0


def test_bruteforce_shape_checks():
    with pytest.raises(DimensionError):
        bruteforce_eq1(np.ones((1, 1, 1, 3, 3)), np.ones((1, 2)), np.ones((1, 3)),
                       np.ones((1, 1)), np.ones(1), np.ones((1, 3, 3)))
    with pytest.raises(DimensionError):
        bruteforce_eq1(np.ones((1, 1, 2, 3, 3)), np.ones((1, 3)), np.ones((1, 3)),
                       np.ones((1, 1)), np.ones(1), np.ones((1, 3, 3)))


def test_fa_hand_zero_weights():
    np.testing.assert_array_equal(fa_hand(np.ones((2, 3)), np.zeros((3, 3)), np.zeros((3, 3))),
                                  [0.5, 0.5, 0.5])


def test_measured_snr():
    x = np.ones(10)
    assert abs(measured_snr_db(x, x + 0.1) - 20.0) < 1e-9


def test_seed_everything():
    seed_everything(3)
    a = (torch.rand(1), np.random.rand())
    seed_everything(3)
    assert torch.equal(a[0], torch.rand(1)) and a[1] == np.random.rand()
