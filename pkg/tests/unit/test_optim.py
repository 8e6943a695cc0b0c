"""Unit tests for the Adam update."""

import numpy as np
import pytest

from src.errors import ContractError
from src.trainer.optim import AdamState, adam_step

pytestmark = pytest.mark.unit


class TestAdamStep:
    """Tests for bias-corrected Adam."""

    def test_first_step_moves_by_lr(self):
        """t=1, g=1, lr=0.1 moves each entry by about -0.1."""
        new, state = adam_step({"w": np.zeros(3)}, {"w": np.ones(3)}, AdamState(), lr=0.1)
        np.testing.assert_allclose(new["w"], np.full(3, -0.0999999990), rtol=1e-9)
        assert state.t == 1

    def test_sign_follows_gradient(self):
        """Negative gradients increase the parameter."""
        new, _ = adam_step({"w": np.zeros(1)}, {"w": -np.ones(1)}, AdamState(), lr=0.01)
        assert new["w"][0] > 0

    def test_zero_lr_leaves_params(self, rng):
        """lr=0 is a no-op on parameters but still advances the moments."""
        params = {"w": rng.standard_normal(4)}
        new, state = adam_step(params, {"w": rng.standard_normal(4)}, AdamState(), lr=0.0)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert np.any(state.m["w"] != 0)

    def test_per_block_scale(self):
        """lr_scale multiplies the step of one block only."""
        params = {"a": np.zeros(1), "b": np.zeros(1)}
        grads = {"a": np.ones(1), "b": np.ones(1)}
        new, _ = adam_step(params, grads, AdamState(), lr=0.1, lr_scale={"b": 10.0})
        assert new["b"][0] == pytest.approx(10.0 * new["a"][0])

    def test_inputs_untouched(self):
        """The update returns new arrays."""
        params = {"w": np.zeros(2)}
        state = AdamState()
        adam_step(params, {"w": np.ones(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], 0.0)
        assert state.t == 0 and not state.m

    def test_keeps_dtype(self):
        """float32 parameters stay float32."""
        new, state = adam_step({"w": np.zeros(2, np.float32)}, {"w": np.ones(2)}, AdamState(), lr=0.1)
        assert new["w"].dtype == np.float32
        assert state.v["w"].dtype == np.float32

    def test_shape_mismatch(self):
        """Gradients must match their block."""
        with pytest.raises(ContractError):
            adam_step({"w": np.zeros(2)}, {"w": np.ones(3)}, AdamState(), lr=0.1)

    def test_step_index_positive(self):
        """t starts at 1."""
        with pytest.raises(ContractError):
            adam_step({"w": np.zeros(1)}, {"w": np.ones(1)}, AdamState(), lr=0.1, t=0)
