"""Test evaluation.py module"""
import json
import tempfile
from os.path import join
from unittest import TestCase

import numpy as np
import pytest

from deepatlas.data import SyntheticSpec, generate_dataset
from deepatlas.evaluation import REG_MODE, SEG_MODE, eval_registration, eval_segmentation, \
    foreground_mean, hard_dice, ordered_pairs, pair_id, read_per_image_csv, summarize, \
    write_report
from deepatlas.nets import init_reg_net, init_seg_net


class EvaluationTest(TestCase):
    """Test evaluation.py module"""

    images = generate_dataset(SyntheticSpec(spatial_shape=(16, 16), count=4, seed=1)).images

    def test_identical_maps(self) -> None:
        """The hard_dice method must give 100 for identical maps"""
        labels = np.random.default_rng(0).integers(3, size=(8, 8))
        np.testing.assert_array_equal(hard_dice(labels, labels, 3), [100.0, 100.0, 100.0])

    def test_disjoint_masks(self) -> None:
        """The hard_dice method must give 0 for disjoint masks"""
        pred = np.array([1, 1, 0, 0])
        true = np.array([0, 0, 1, 1])
        self.assertEqual(hard_dice(pred, true, 2)[1], 0.0)

    def test_direct_count(self) -> None:
        """The hard_dice method must give 50 for sizes 3 and 5 with overlap 2"""
        pred = np.array([1, 1, 1, 0, 0, 0, 0, 0])
        true = np.array([0, 1, 1, 1, 1, 1, 0, 0])
        self.assertEqual(hard_dice(pred, true, 2)[1], 50.0)

    def test_absent_class(self) -> None:
        """A class absent from both maps must score 100"""
        labels = np.array([0, 1, 1, 0])
        self.assertEqual(hard_dice(labels, labels, 3)[2], 100.0)

    def test_symmetry_and_permutation(self) -> None:
        """The hard_dice method must be symmetric and invariant to voxel order"""
        rng = np.random.default_rng(2)
        a, b = rng.integers(4, size=50), rng.integers(4, size=50)
        order = rng.permutation(50)
        np.testing.assert_array_equal(hard_dice(a, b, 4), hard_dice(b, a, 4))
        np.testing.assert_allclose(hard_dice(a[order], b[order], 4), hard_dice(a, b, 4))

    def test_shape_mismatch(self) -> None:
        """The hard_dice method must reject maps of different shapes"""
        with pytest.raises(ValueError):
            hard_dice(np.zeros(4), np.zeros(5), 2)

    def test_summarize(self) -> None:
        """The summarize method must average foreground classes and named groups"""
        scores = {'a': np.array([100.0, 80.0, 60.0]), 'b': np.array([100.0, 40.0, 20.0])}
        report = summarize(SEG_MODE, 3, scores, {'second': [2]})
        self.assertAlmostEqual(report.mean_dice, 50.0)
        self.assertAlmostEqual(report.std_dice, 20.0)
        self.assertEqual(report.per_class, [100.0, 60.0, 40.0])
        self.assertEqual(report.groups, {'second': 40.0})
        self.assertEqual(foreground_mean(scores['a']), 70.0)

        with pytest.raises(ValueError):
            summarize(SEG_MODE, 3, scores, {'bad': [3]})

    def test_zero_field_equals_unwarped_dice(self) -> None:
        """Registration with a fresh network must score the unwarped label overlap"""
        report = eval_registration(init_reg_net(depth=2, width=2), self.images, 4)
        self.assertEqual(report.mode, REG_MODE)
        self.assertEqual(len(report.per_image), len(self.images) * (len(self.images) - 1))
        self.assertEqual(report.folding_fraction, 0.0)

        for moving, target in ordered_pairs(self.images):
            expected = hard_dice(moving.labels, target.labels, 4)
            np.testing.assert_array_equal(report.per_image[pair_id(moving, target)], expected)

    def test_eval_segmentation(self) -> None:
        """The eval_segmentation method must report Dice in [0, 100] for every image"""
        report = eval_segmentation(init_seg_net(depth=2, width=2), self.images)
        self.assertEqual(sorted(report.per_image), sorted(image.id for image in self.images))
        self.assertTrue(0.0 <= report.mean_dice <= 100.0)
        self.assertIn('seg: Dice', report.summary())

    def test_report_files(self) -> None:
        """The report means must be re-derivable from the per-image CSV"""
        report = eval_registration(init_reg_net(depth=2, width=2), self.images, 4,
                                   {'inner': [2, 3]}, {'split': 'test'})

        with tempfile.TemporaryDirectory() as tmp:
            write_report(report, tmp)
            rows = read_per_image_csv(join(tmp, 'per_image.csv'))

            with open(join(tmp, 'report.json'), encoding='utf-8') as file:
                stored = json.load(file)

        self.assertEqual(rows, report.per_image)
        means = [foreground_mean(np.array(row)) for row in rows.values()]
        self.assertAlmostEqual(float(np.mean(means)), stored['mean_dice'], delta=1e-12)
        self.assertEqual(stored['metadata'], {'split': 'test'})
        self.assertIn('inner', stored['groups'])
