"""Test nets.py module"""
from unittest import TestCase

import numpy as np
import pytest

from deepatlas.imageops import warp
from deepatlas.nets import describe, init_from_hyperparams, init_reg_net, init_seg_net, \
    parameter_count, reg_forward, reg_widths, seg_forward, seg_widths
from deepatlas.tensor import ShapeError, Tensor


class NetsTest(TestCase):
    """Test nets.py module"""

    rng = np.random.default_rng(5)

    def test_seg_output_shape(self) -> None:
        """The seg_forward method must return K probability channels of input size"""
        params = init_seg_net(depth=2, width=4, classes=3)
        out = seg_forward(params, Tensor(self.rng.uniform(size=(2, 1, 32, 32))))
        self.assertEqual(out.shape, (2, 3, 32, 32))
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_seg_3d(self) -> None:
        """The seg_forward method must support 3-D images"""
        params = init_seg_net(depth=1, width=2, classes=2, dim=3)
        out = seg_forward(params, Tensor(self.rng.uniform(size=(1, 1, 4, 4, 4))))
        self.assertEqual(out.shape, (1, 2, 4, 4, 4))

    def test_seg_indivisible_extent(self) -> None:
        """The seg_forward method must reject extents not divisible by 2^depth"""
        params = init_seg_net(depth=3, width=2)

        with pytest.raises(ShapeError):
            seg_forward(params, Tensor(np.zeros((1, 1, 12, 16))))

    def test_fresh_reg_net_is_identity(self) -> None:
        """A fresh registration network must predict zero displacement"""
        params = init_reg_net(depth=2, width=4)
        moving = Tensor(self.rng.uniform(size=(1, 1, 32, 32)))
        target = Tensor(self.rng.uniform(size=(1, 1, 32, 32)))
        field = reg_forward(params, moving, target)
        self.assertEqual(field.u.shape, (1, 2, 32, 32))
        np.testing.assert_array_equal(field.u.data, 0.0)
        np.testing.assert_array_equal(warp(moving, field).data, moving.data)

    def test_reg_shape_mismatch(self) -> None:
        """The reg_forward method must reject moving and target of different shapes"""
        params = init_reg_net(depth=1, width=2)

        with pytest.raises(ShapeError):
            reg_forward(params, Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 8, 4))))

    def test_widths(self) -> None:
        """The width helpers must double per level in the segmentation network only"""
        self.assertEqual(seg_widths(3, 16), [16, 32, 64, 128])
        self.assertEqual(reg_widths(3, 16), [16, 32, 32, 32])

    def test_parameter_count_is_size_independent(self) -> None:
        """The parameter count must depend on hyperparameters only"""
        params = init_seg_net(depth=1, width=2, classes=2)
        count = parameter_count(params)
        seg_forward(params, Tensor(np.zeros((1, 1, 8, 8))))
        seg_forward(params, Tensor(np.zeros((1, 1, 16, 4))))
        self.assertEqual(parameter_count(params), count)
        self.assertEqual(parameter_count(init_seg_net(depth=1, width=2, classes=2, seed=9)),
                         count)

    def test_seg_parameter_count(self) -> None:
        """The describe method must report the exact number of weights"""
        params = init_seg_net(depth=1, width=2, classes=3, dim=2)
        # enc0: 1->2, 2->2; enc1: 2->4, 4->4; dec0: 6->2, 2->2; head 1x1 2->3
        expected = (2 * 9 + 2) + (2 * 2 * 9 + 2) + (2 * 4 * 9 + 4) + (4 * 4 * 9 + 4) + \
            (6 * 2 * 9 + 2) + (2 * 2 * 9 + 2) + (2 * 3 + 3)
        self.assertEqual(describe(params)['parameters'], expected)
        self.assertEqual(describe(params)['classes'], 3)

    def test_seeded_init(self) -> None:
        """Network initialization must be a pure function of the seed"""
        a = init_seg_net(depth=1, width=2, seed=4)
        b = init_seg_net(depth=1, width=2, seed=4)
        c = init_seg_net(depth=1, width=2, seed=5)

        for name in a.names():
            np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)

        self.assertFalse(np.array_equal(a.tensors['enc0.conv1.w'].data,
                                        c.tensors['enc0.conv1.w'].data))

    def test_init_from_hyperparams(self) -> None:
        """The init_from_hyperparams method must rebuild the same architecture"""
        params = init_reg_net(depth=2, width=3, dim=3)
        rebuilt = init_from_hyperparams(params.hyperparams())
        self.assertEqual(describe(rebuilt), describe(params))

        with pytest.raises(ValueError):
            init_from_hyperparams({'kind': 'gan', 'depth': 1, 'width': 1, 'dim': 2})

    def test_copy_is_independent(self) -> None:
        """The copy method must not share tensor data"""
        params = init_seg_net(depth=1, width=2)
        copy = params.copy()
        copy.tensors['head.w'].data[...] = 0.0
        self.assertFalse(np.all(params.tensors['head.w'].data == 0.0))
