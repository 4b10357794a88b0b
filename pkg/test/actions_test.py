"""Test actions.py module"""
import json
import tempfile
from os.path import join
from unittest import TestCase

import numpy as np
import pytest

from deepatlas.actions import UNEXPECTED_ERROR, do_gen_data, exit_code_for, make_partition, \
    read_image
from deepatlas.checkpoint import CheckpointError
from deepatlas.data import DataGenerationError, SyntheticSpec, generate_dataset
from deepatlas.global_config import EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_NUMERIC_FAILURE
from deepatlas.run_config import parse_config
from deepatlas.tensor import ShapeError
from deepatlas.trainer import ConfigError, NumericFailure


class ActionsTest(TestCase):
    """Test actions.py module"""

    def test_exit_code_for(self) -> None:
        """The exit_code_for method must map every error family to its exit code"""
        self.assertEqual(exit_code_for(ConfigError('x')), EXIT_CONFIG_ERROR)
        self.assertEqual(exit_code_for(DataGenerationError('x')), EXIT_CONFIG_ERROR)
        self.assertEqual(exit_code_for(ShapeError('x')), EXIT_CONFIG_ERROR)
        self.assertEqual(exit_code_for(NumericFailure('x')), EXIT_NUMERIC_FAILURE)
        self.assertEqual(exit_code_for(FileNotFoundError('x')), EXIT_IO_ERROR)
        self.assertEqual(exit_code_for(CheckpointError('x')), EXIT_IO_ERROR)
        self.assertEqual(exit_code_for(KeyError('x')), UNEXPECTED_ERROR)

    def test_read_image(self) -> None:
        """The read_image method must accept images with or without batch axes"""
        with tempfile.TemporaryDirectory() as tmp:
            path = join(tmp, 'image.npy')
            np.save(path, np.zeros((6, 8)))
            self.assertEqual(read_image(path, 2).shape, (1, 1, 6, 8))
            np.save(path, np.zeros((2, 3, 6, 8)))

            with pytest.raises(ShapeError):
                read_image(path, 2)

    def test_make_partition(self) -> None:
        """The make_partition method must report partitions that do not fit as ConfigError"""
        dataset = generate_dataset(SyntheticSpec(spatial_shape=(8, 8), count=4))
        config = parse_config({'data': {'n_train': 2, 'n_val': 1, 'n_test': 1, 'n_labeled': 1},
                               'train': {'protocol': 'mono_seg'},
                               'output': {'directory': 'run'}})
        self.assertEqual(len(make_partition(config, dataset).labeled_ids), 1)
        config.data.n_test = 5

        with pytest.raises(ConfigError):
            make_partition(config, dataset)

    def test_gen_data_invalid_spec(self) -> None:
        """The do_gen_data method must reject invalid dataset specs with ConfigError"""
        with tempfile.TemporaryDirectory() as tmp:
            spec_path = join(tmp, 'spec.json')

            with open(spec_path, 'w', encoding='utf-8') as file:
                json.dump({'classes': 1}, file)

            with pytest.raises(ConfigError):
                do_gen_data(spec_path, join(tmp, 'data'), 1, 1, 1)
