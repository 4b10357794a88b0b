"""Test optim.py module"""
from unittest import TestCase

import numpy as np
import pytest

from deepatlas.nets import init_seg_net
from deepatlas.optim import Adam, AdamState, adam_step, decayed_lr


class OptimTest(TestCase):
    """Test optim.py module"""

    def test_zero_gradient(self) -> None:
        """The adam_step method must leave parameters unchanged for zero gradient"""
        params = {'w': np.array([1.0, -2.0])}
        adam_step(params, {'w': np.zeros(2)}, AdamState(), lr=0.1)
        np.testing.assert_array_equal(params['w'], [1.0, -2.0])

    def test_first_step_magnitude(self) -> None:
        """The first Adam step must move a scalar by about -lr"""
        params = {'w': np.array([0.5])}
        adam_step(params, {'w': np.array([1.0])}, AdamState(), lr=0.01)
        self.assertAlmostEqual(float(params['w'][0]), 0.49, delta=1e-8)

    def test_quadratic_decreases(self) -> None:
        """Adam on f(w) = w^2 must decrease f monotonically after warmup"""
        params = {'w': np.array([1.0])}
        state = AdamState()
        values = []

        for _ in range(10):
            adam_step(params, {'w': 2.0 * params['w']}, state, lr=0.1)
            values.append(float(params['w'][0] ** 2))

        self.assertTrue(all(b < a for a, b in zip(values[1:], values[2:])))
        self.assertLess(values[-1], 1.0)

    def test_invalid_lr(self) -> None:
        """The adam_step method must reject non-positive learning rates"""
        with pytest.raises(ValueError):
            adam_step({'w': np.zeros(1)}, {}, AdamState(), lr=0.0)

    def test_adam_clears_gradients(self) -> None:
        """The Adam.step method must update only tensors with gradients and clear them"""
        params = init_seg_net(depth=1, width=2)
        before = {name: t.data.copy() for name, t in params.tensors.items()}
        params.tensors['head.b'].grad = np.ones_like(params.tensors['head.b'].data)
        Adam(params, lr=0.01).step()

        for name, tensor in params.tensors.items():
            self.assertIsNone(tensor.grad)

            if name == 'head.b':
                np.testing.assert_allclose(tensor.data, before[name] - 0.01, atol=1e-8)
            else:
                np.testing.assert_array_equal(tensor.data, before[name])

    def test_decayed_lr(self) -> None:
        """The decayed_lr method must apply the decay at every milestone reached"""
        self.assertEqual(decayed_lr(1e-3, 0.2, [5, 8], 0), 1e-3)
        self.assertAlmostEqual(decayed_lr(1e-3, 0.2, [5, 8], 5), 2e-4)
        self.assertAlmostEqual(decayed_lr(1e-3, 0.2, [5, 8], 9), 4e-5)

        with pytest.raises(ValueError):
            decayed_lr(1e-3, 0.0, [], 0)
