"""Test data.py module"""
import tempfile
from unittest import TestCase

import numpy as np
import pytest

from deepatlas.data import ALL_LABELED, DataGenerationError, LabeledImage, SyntheticSpec, \
    as_batch, generate_dataset, generate_image, is_fold_free, load_dataset, load_split, \
    make_template, one_hot, save_dataset, split

SMALL_SPEC = SyntheticSpec(spatial_shape=(16, 16), classes=4, count=8, seed=3)


class DataTest(TestCase):
    """Test data.py module"""

    dataset = generate_dataset(SMALL_SPEC)

    def test_spec_validation(self) -> None:
        """The SyntheticSpec class must reject invalid parameters"""
        with pytest.raises(ValueError):
            SyntheticSpec(classes=1)

        with pytest.raises(ValueError):
            SyntheticSpec(spatial_shape=(2, 16))

        with pytest.raises(ValueError):
            SyntheticSpec(noise_sd=-0.1)

    def test_spec_dict_round_trip(self) -> None:
        """The SyntheticSpec dict form must rebuild an equal spec"""
        self.assertEqual(SyntheticSpec.from_dict(SMALL_SPEC.to_dict()), SMALL_SPEC)

    def test_undeformed_images_equal_template(self) -> None:
        """Zero amplitude and noise must reproduce the template"""
        spec = SyntheticSpec(spatial_shape=(16, 16), count=3, amplitude=0.0, noise_sd=0.0,
                             bias_amplitude=0.0)
        labels, intensity = make_template(spec)

        for image in generate_dataset(spec).images:
            np.testing.assert_array_equal(image.intensity[0], intensity)
            np.testing.assert_array_equal(image.labels, labels)

    def test_label_classes(self) -> None:
        """Generated label maps must contain exactly the template classes"""
        labels, _ = make_template(SMALL_SPEC)

        for image in self.dataset.images:
            np.testing.assert_array_equal(np.unique(image.labels), np.unique(labels))

    def test_images_differ(self) -> None:
        """Distinct indices must give distinct images"""
        first, second = self.dataset.images[:2]
        self.assertFalse(np.array_equal(first.intensity, second.intensity))

    def test_generation_is_deterministic(self) -> None:
        """Generation must be a pure function of spec and index"""
        again = generate_image(SMALL_SPEC, 2)
        np.testing.assert_array_equal(again.image.intensity, self.dataset.items[2].image.intensity)
        np.testing.assert_array_equal(again.field, self.dataset.items[2].field)

    def test_fields_are_fold_free(self) -> None:
        """Every generating field must have positive Jacobian determinant"""
        for item in self.dataset.items:
            self.assertTrue(is_fold_free(item.field))

    def test_intensity_range(self) -> None:
        """Generated intensities must lie in [0, 1]"""
        for image in self.dataset.images:
            self.assertGreaterEqual(image.intensity.min(), 0.0)
            self.assertLessEqual(image.intensity.max(), 1.0)

    def test_folding_spec_fails(self) -> None:
        """An amplitude that folds after every retry must raise DataGenerationError"""
        spec = SyntheticSpec(spatial_shape=(8, 8), count=1, amplitude=1e6)

        with pytest.raises(DataGenerationError):
            generate_image(spec, 0)

    def test_labeled_image_validation(self) -> None:
        """The LabeledImage class must reject intensities outside of [0, 1]"""
        with pytest.raises(ValueError):
            LabeledImage('bad', np.full((1, 4, 4), 1.5))

        with pytest.raises(ValueError):
            LabeledImage('bad', np.zeros((1, 4, 4)), np.zeros((4, 5), dtype=np.int64))

    def test_split(self) -> None:
        """The split method must keep labels of exactly n_labeled training images"""
        partition = split(self.dataset, 2, 0, 4, 2, 2)
        self.assertEqual(len(partition.train), 4)
        self.assertEqual(len(partition.val), 2)
        self.assertEqual(len(partition.test), 2)
        self.assertEqual(len(partition.labeled_ids), 2)
        self.assertEqual(sorted(partition.hidden.ids() + partition.labeled_ids),
                         [image.id for image in partition.train])
        self.assertTrue(all(image.is_labeled for image in partition.val + partition.test))

    def test_split_is_seeded(self) -> None:
        """The labeled subset must depend only on the seed"""
        self.assertEqual(split(self.dataset, 2, 5, 4, 2, 2).labeled_ids,
                         split(self.dataset, 2, 5, 4, 2, 2).labeled_ids)

    def test_split_all_labeled(self) -> None:
        """ALL_LABELED must keep every training label"""
        partition = split(self.dataset, ALL_LABELED, 0, 4, 2, 2)
        self.assertEqual(len(partition.labeled_ids), 4)
        self.assertEqual(partition.hidden.ids(), [])

    def test_split_too_large(self) -> None:
        """The split method must reject partitions larger than the dataset"""
        with pytest.raises(ValueError):
            split(self.dataset, 2, 0, 6, 2, 2)

        with pytest.raises(ValueError):
            split(self.dataset, 5, 0, 4, 2, 2)

    def test_hidden_labels_record_reads(self) -> None:
        """The hidden labels guard must record every read"""
        partition = split(self.dataset, 1, 0, 4, 2, 2)
        hidden_id = partition.hidden.ids()[0]
        partition.hidden.reveal(hidden_id)
        self.assertEqual(partition.hidden.reads, [hidden_id])

    def test_training_images(self) -> None:
        """The training_images method must record images carrying hidden labels"""
        partition = split(self.dataset, 1, 0, 4, 2, 2)
        self.assertEqual(len(partition.training_images()), 4)
        self.assertEqual(partition.hidden.reads, [])
        index = next(i for i, image in enumerate(partition.train) if not image.is_labeled)
        partition.train[index] = self.dataset.images[index]
        partition.training_images()
        self.assertEqual(partition.hidden.reads, [self.dataset.images[index].id])

    def test_save_load_round_trip(self) -> None:
        """A saved dataset must load bitwise identical together with its split"""
        partition = split(self.dataset, ALL_LABELED, 0, 4, 2, 2)

        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(tmp, self.dataset, partition)
            loaded = load_dataset(tmp)
            stored = load_split(tmp, loaded)

        self.assertEqual(loaded.spec, SMALL_SPEC)
        self.assertEqual(loaded.ids, self.dataset.ids)

        for a, b in zip(loaded.items, self.dataset.items):
            np.testing.assert_array_equal(a.image.intensity, b.image.intensity)
            np.testing.assert_array_equal(a.image.labels, b.image.labels)
            np.testing.assert_array_equal(a.field, b.field)
            self.assertEqual(a.image.intensity.dtype, b.image.intensity.dtype)

        assert stored is not None
        self.assertEqual(stored.to_dict(), partition.to_dict())

    def test_load_split_absent(self) -> None:
        """The load_split method must return None for datasets stored without a split"""
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(tmp, self.dataset)
            self.assertIsNone(load_split(tmp, self.dataset))

    def test_one_hot(self) -> None:
        """The one_hot method must encode a label map as [1, K, spatial...]"""
        encoded = one_hot(np.array([[0, 2], [1, 2]]), 3)
        self.assertEqual(encoded.shape, (1, 3, 2, 2))
        np.testing.assert_array_equal(encoded[0, 2], [[0.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(encoded.sum(axis=1), 1.0)

    def test_as_batch(self) -> None:
        """The as_batch method must stack intensities into [N, 1, spatial...]"""
        self.assertEqual(as_batch(self.dataset.images[:3]).shape, (3, 1, 16, 16))
