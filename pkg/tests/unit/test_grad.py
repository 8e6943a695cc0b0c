"""Unit tests for the tape, the parameter store and the gradient checks."""

import numpy as np
import pytest

from src.errors import ContractError, NonFiniteLoss
from src.grad.check import (
    directional_check,
    evaluate,
    finite_difference_grad,
    grad,
    relative_error,
    value_and_grad,
)
from src.grad.store import ParameterStore
from src.grad.tape import Tensor, exp, gradients, log, sigmoid, softplus, stop_gradient

pytestmark = pytest.mark.unit


def quadratic(blocks):
    return (blocks["x"] ** 2).sum()


class TestTape:
    """Tests for elementary reverse-mode rules."""

    def test_product_rule(self):
        """d(xy)/dx = y and d(xy)/dy = x."""
        x = Tensor(np.array(3.0), requires_grad=True)
        y = Tensor(np.array(-2.0), requires_grad=True)
        gx, gy = gradients(x * y, [x, y])
        assert float(gx) == -2.0
        assert float(gy) == 3.0

    def test_broadcast_gradient_is_summed(self):
        """A broadcast bias receives the sum of upstream gradients."""
        b = Tensor(np.zeros(3), requires_grad=True)
        out = (np.ones((4, 3)) + b).sum()
        (gb,) = gradients(out, [b])
        np.testing.assert_array_equal(gb, np.full(3, 4.0))

    def test_smooth_elementwise(self):
        """exp, log, sigmoid and softplus derivatives at 0.5."""
        x = Tensor(np.array(0.5), requires_grad=True)
        s = 1.0 / (1.0 + np.exp(-0.5))
        for fn, expected in ((exp, np.exp(0.5)), (log, 2.0), (sigmoid, s * (1 - s)), (softplus, s)):
            (g,) = gradients(fn(x), [x])
            assert float(g) == pytest.approx(expected, rel=1e-12)

    def test_stop_gradient(self):
        """Stopped values act as constants."""
        x = Tensor(np.array(2.0), requires_grad=True)
        (g,) = gradients(x * stop_gradient(x), [x])
        assert float(g) == 2.0

    def test_advanced_index_accumulates(self):
        """Repeated indices add their gradients."""
        x = Tensor(np.arange(3.0), requires_grad=True)
        (g,) = gradients(x[np.array([0, 0, 2])].sum(), [x])
        np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])

    def test_unreached_leaf_is_zero(self):
        """A leaf the loss never touched gets a zero gradient."""
        x = Tensor(np.ones(2), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        _, gy = gradients((x * 2.0).sum(), [x, y])
        np.testing.assert_array_equal(gy, np.zeros(3))


class TestParameterStore:
    """Tests for named blocks and their flat view."""

    def test_flatten_unflatten(self, rng):
        """unflatten inverts flatten and keeps order."""
        store = ParameterStore({"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4)})
        again = store.unflatten(store.flatten())
        assert again.names == ["a", "b"]
        np.testing.assert_array_equal(again["a"], store["a"])
        assert store.size == 10

    def test_duplicate_name(self):
        """Block names are unique."""
        store = ParameterStore({"a": np.zeros(1)})
        with pytest.raises(ContractError):
            store.add("a", np.zeros(1))

    def test_setitem_checks_shape(self):
        """Replacing a block keeps its shape."""
        store = ParameterStore({"a": np.zeros(2)})
        with pytest.raises(ContractError):
            store["a"] = np.zeros(3)

    def test_rejects_non_finite(self):
        """NaN parameters never enter the store."""
        with pytest.raises(ContractError):
            ParameterStore({"a": np.array([np.nan])})

    def test_bad_flat_length(self):
        """A vector of the wrong length is rejected."""
        with pytest.raises(ContractError):
            ParameterStore({"a": np.zeros(2)}).unflatten(np.zeros(3))


class TestGradientChecks:
    """Tests for reverse-mode and finite-difference gradients."""

    def test_square_at_three(self):
        """d/dx x^2 at 3 is 6, both ways."""
        params = ParameterStore({"x": np.array([3.0])})
        value, g = value_and_grad(quadratic, params)
        assert value == 9.0
        assert g[0] == pytest.approx(6.0, abs=1e-12)
        assert finite_difference_grad(quadratic, params, 1e-4)[0] == pytest.approx(6.0, abs=1e-8)

    @pytest.mark.parametrize("order", [2, 4, 6])
    def test_linear_loss_is_exact(self, order, rng):
        """Every stencil is exact on a linear loss."""
        a = rng.standard_normal(5)
        params = ParameterStore({"x": rng.standard_normal(5)})
        numeric = finite_difference_grad(lambda b: (b["x"] * a).sum(), params, 1e-3, order=order)
        np.testing.assert_allclose(numeric, a, rtol=1e-9)

    def test_constant_loss(self):
        """A loss that ignores its parameters has zero gradient."""
        params = ParameterStore({"x": np.ones(3)})
        np.testing.assert_array_equal(grad(lambda b: np.float64(4.0) + 0.0 * b["x"].sum(), params), 0.0)

    def test_unused_block_is_zero(self, rng):
        """Blocks outside the loss report zero, not missing."""
        params = ParameterStore({"x": rng.standard_normal(2), "unused": rng.standard_normal(3)})
        g = grad(quadratic, params)
        assert g.shape == (5,)
        np.testing.assert_array_equal(g[2:], 0.0)

    def test_gradient_is_linear_in_loss(self, rng):
        """grad(a f + b g) = a grad f + b grad g."""
        params = ParameterStore({"x": rng.standard_normal(4)})

        def cubic(b):
            return (b["x"] ** 3).sum()

        combined = grad(lambda b: 2.0 * quadratic(b) - 3.0 * cubic(b), params)
        np.testing.assert_allclose(combined, 2.0 * grad(quadratic, params) - 3.0 * grad(cubic, params))

    def test_subset_of_coordinates(self, rng):
        """Unselected coordinates stay zero."""
        params = ParameterStore({"x": rng.standard_normal(4)})
        numeric = finite_difference_grad(quadratic, params, 1e-4, coords=[1, 3])
        assert numeric[0] == 0.0 and numeric[2] == 0.0
        assert numeric[1] == pytest.approx(2.0 * params["x"][1], abs=1e-7)

    def test_directional(self, rng):
        """Directional derivative agrees with a central difference."""
        params = ParameterStore({"x": rng.standard_normal(6)})
        analytic, numeric = directional_check(
            lambda b: softplus(b["x"]).sum(), params, rng.standard_normal(6), 1e-5
        )
        assert analytic == pytest.approx(numeric, rel=1e-7)

    def test_unsupported_order(self):
        """Only orders 2, 4 and 6 exist."""
        with pytest.raises(ContractError):
            finite_difference_grad(quadratic, ParameterStore({"x": np.ones(1)}), order=3)

    def test_non_finite_loss(self):
        """NaN losses raise instead of propagating."""
        with pytest.raises(NonFiniteLoss):
            evaluate(lambda b: b["x"].sum() * np.nan, {"x": np.ones(1)})

    def test_relative_error_floor(self):
        """Tiny values are compared against the floor."""
        np.testing.assert_allclose(relative_error(np.array([1e-12]), np.array([0.0]), floor=1e-6), [1e-6])
