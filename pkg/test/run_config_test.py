"""Test run_config.py module"""
import json
import tempfile
from os.path import join
from typing import Any, Dict
from unittest import TestCase

import pytest

from deepatlas.run_config import BRAIN_PRESET, CONFIG_KEYS, ConfigError, describe_keys, \
    load_config, parse_config
from deepatlas.trainer import DEF_JOINT_LR_REG, DEF_JOINT_LR_SEG, DEF_MONO_LR


def minimal(**train: Any) -> Dict[str, Any]:
    """Smallest valid document"""
    return {'train': dict({'protocol': 'mono_seg'}, **train), 'output': {'directory': 'run'}}


class RunConfigTest(TestCase):
    """Test run_config.py module"""

    def test_defaults(self) -> None:
        """The parse_config method must fill every omitted key with its default"""
        config = parse_config(minimal())
        self.assertEqual(config.train.alt_ratio, 20)
        self.assertEqual(config.data.n_labeled, 2)
        self.assertEqual(config.loss.weights().lambda_r, 20000.0)
        self.assertEqual(config.loss.weights().lambda_a, 3.0)
        self.assertEqual(config.output.directory, 'run')

    def test_required_keys(self) -> None:
        """The parse_config method must reject documents without protocol or output"""
        with pytest.raises(ConfigError):
            parse_config({'output': {'directory': 'run'}})

        with pytest.raises(ConfigError):
            parse_config({'train': {'protocol': 'da'}})

    def test_unknown_keys(self) -> None:
        """The parse_config method must reject unknown sections and keys"""
        document = minimal()
        document['optimizer'] = {}

        with pytest.raises(ConfigError):
            parse_config(document)

        with pytest.raises(ConfigError):
            parse_config(minimal(momentum=0.9))

    def test_types(self) -> None:
        """The parse_config method must reject values of wrong type"""
        with pytest.raises(ConfigError):
            parse_config(minimal(epochs='10'))

        with pytest.raises(ConfigError):
            parse_config(minimal(epochs=True))

        with pytest.raises(ConfigError):
            parse_config([])

    def test_invalid_values(self) -> None:
        """The parse_config method must reject out-of-range values"""
        with pytest.raises(ConfigError):
            parse_config(minimal(protocol='supervised'))

        with pytest.raises(ConfigError):
            parse_config(minimal(alt_ratio=0))

        document = minimal()
        document['eval'] = {'class_groups': {'bad': [7]}}

        with pytest.raises(ConfigError):
            parse_config(document)

        document = minimal()
        document['data'] = {'path': 'data', 'synthetic': {}}

        with pytest.raises(ConfigError):
            parse_config(document)

    def test_presets(self) -> None:
        """The brain preset must lower lambda_r unless it is given explicitly"""
        document = minimal()
        document['loss'] = {'preset': BRAIN_PRESET}
        self.assertEqual(parse_config(document).loss.weights().lambda_r, 5000.0)
        document['loss']['lambda_r'] = 100
        self.assertEqual(parse_config(document).loss.weights().lambda_r, 100.0)

    def test_learning_rates(self) -> None:
        """Learning rates must default to mono or joint values by protocol"""
        mono = parse_config(minimal()).train_config()
        self.assertEqual((mono.lr_seg, mono.lr_reg), (DEF_MONO_LR, DEF_MONO_LR))
        joint = parse_config(minimal(protocol='da')).train_config()
        self.assertEqual((joint.lr_seg, joint.lr_reg), (DEF_JOINT_LR_SEG, DEF_JOINT_LR_REG))
        given = parse_config(minimal(protocol='da', lr_seg=0.01)).train_config()
        self.assertEqual(given.lr_seg, 0.01)

    def test_synthetic_spec(self) -> None:
        """The synthetic spec must agree with the model section"""
        document = minimal()
        document['data'] = {'synthetic': {'spatial_shape': [16, 16], 'count': 10}}
        self.assertEqual(parse_config(document).data.synthetic_spec().count, 10)
        document['data'] = {'synthetic': {'classes': 3}}

        with pytest.raises(ConfigError):
            parse_config(document)

    def test_load_config(self) -> None:
        """The load_config method must read JSON files and reject malformed ones"""
        with tempfile.TemporaryDirectory() as tmp:
            good, bad = join(tmp, 'good.json'), join(tmp, 'bad.json')

            with open(good, 'w', encoding='utf-8') as file:
                json.dump(minimal(epochs=3), file)

            with open(bad, 'w', encoding='utf-8') as file:
                file.write('{"train": ')

            self.assertEqual(load_config(good).train.epochs, 3)

            with pytest.raises(ConfigError):
                load_config(bad)

    def test_describe_keys(self) -> None:
        """The describe_keys method must document every key"""
        text = describe_keys()

        for key in CONFIG_KEYS:
            self.assertIn(f'{key.section}.{key.key} = ', text)

        self.assertIn('train.protocol = required', text)
