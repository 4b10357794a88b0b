"""Test cmd.py module"""
import json
import tempfile
from os.path import isfile, join
from typing import Any, Dict
from unittest import TestCase

import numpy as np
from click.testing import CliRunner

from deepatlas.checkpoint import load_reg_checkpoint, load_seg_checkpoint
from deepatlas.cmd import deepatlas, parse_class_groups
from deepatlas.global_config import EXIT_CONFIG_ERROR, EXIT_IO_ERROR, EXIT_OK
from deepatlas.nets import reg_forward, seg_forward
from deepatlas.tensor import Tensor


def write_config(path: str, protocol: str, data_dir: str, out_dir: str) -> str:
    """Run config for tiny networks trained on the generated dataset"""
    document: Dict[str, Any] = {
        'data': {'path': data_dir, 'n_labeled': 2, 'n_train': 4, 'n_val': 2, 'n_test': 2},
        'model': {'depth': 2, 'width': 2},
        'train': {'protocol': protocol, 'epochs': 1, 'pairs_per_epoch': 2},
        'output': {'directory': out_dir},
    }

    with open(path, 'w', encoding='utf-8') as file:
        json.dump(document, file)

    return path


class CmdTest(TestCase):
    """Test cmd.py module"""

    tmp: Any = None
    data_dir = ''
    seg_dir = ''
    reg_dir = ''

    @classmethod
    def setUpClass(cls) -> None:
        cls.tmp = tempfile.TemporaryDirectory()  # pylint: disable=consider-using-with
        root = cls.tmp.name
        cls.data_dir = join(root, 'data')
        cls.seg_dir = join(root, 'seg_run')
        cls.reg_dir = join(root, 'reg_run')
        spec_path = join(root, 'spec.json')

        with open(spec_path, 'w', encoding='utf-8') as file:
            json.dump({'spatial_shape': [16, 16], 'count': 8, 'seed': 0}, file)

        runner = CliRunner()
        result = runner.invoke(deepatlas, ['gen-data', '--spec', spec_path, '--out', cls.data_dir,
                                           '--n-train', '4', '--n-val', '2', '--n-test', '2'])
        assert result.exit_code == EXIT_OK, result.output

        for protocol, out_dir in (('mono_seg', cls.seg_dir), ('mono_reg', cls.reg_dir)):
            config = write_config(join(root, f'{protocol}.json'), protocol, cls.data_dir, out_dir)
            result = runner.invoke(deepatlas, ['train', '--config', config])
            assert result.exit_code == EXIT_OK, result.output

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmp.cleanup()

    def image_path(self, index: int) -> str:
        """Stored intensity of a generated image"""
        return join(self.data_dir, 'images', f'img{index:03d}_intensity.npy')

    def test_gen_data_outputs(self) -> None:
        """The gen-data command must write manifest with default partition"""
        with open(join(self.data_dir, 'manifest.json'), encoding='utf-8') as file:
            manifest = json.load(file)

        self.assertEqual(len(manifest['images']), 8)
        self.assertEqual(manifest['split']['test'], ['img006', 'img007'])
        self.assertTrue(isfile(self.image_path(7)))

    def test_train_outputs(self) -> None:
        """The train command must write checkpoint, metrics, reports and summary"""
        for name in ('seg.ckpt', 'metrics.jsonl', 'summary.json', 'deepatlas.log'):
            self.assertTrue(isfile(join(self.seg_dir, name)), name)

        self.assertTrue(isfile(join(self.seg_dir, 'reports', 'val_seg', 'report.json')))
        self.assertTrue(isfile(join(self.reg_dir, 'reg.ckpt')))
        self.assertTrue(isfile(join(self.reg_dir, 'reports', 'val_reg', 'per_image.csv')))

        with open(join(self.seg_dir, 'metrics.jsonl'), encoding='utf-8') as file:
            records = [json.loads(line) for line in file]

        self.assertTrue(all(np.isfinite(r['total']) for r in records if 'total' in r))

    def test_segment(self) -> None:
        """The segment command must reproduce the in-memory network output"""
        checkpoint = join(self.seg_dir, 'seg.ckpt')

        with tempfile.TemporaryDirectory() as tmp:
            out = join(tmp, 'probs.npy')
            result = CliRunner().invoke(deepatlas, ['segment', '--checkpoint', checkpoint,
                                                    '--image', self.image_path(0), '--out', out])
            self.assertEqual(result.exit_code, EXIT_OK, result.output)
            probs = np.load(out)

        image = Tensor(np.load(self.image_path(0))[None])
        np.testing.assert_array_equal(probs, seg_forward(load_seg_checkpoint(checkpoint),
                                                         image).data)
        self.assertEqual(probs.shape, (1, 4, 16, 16))

    def test_register(self) -> None:
        """The register command must reproduce the in-memory displacement field"""
        checkpoint = join(self.reg_dir, 'reg.ckpt')

        with tempfile.TemporaryDirectory() as tmp:
            field_path, warped_path = join(tmp, 'field.npy'), join(tmp, 'warped.npy')
            result = CliRunner().invoke(deepatlas, [
                'register', '--checkpoint', checkpoint, '--moving', self.image_path(0),
                '--target', self.image_path(1), '--out-field', field_path,
                '--out-warped', warped_path])
            self.assertEqual(result.exit_code, EXIT_OK, result.output)
            field = np.load(field_path)
            self.assertEqual(np.load(warped_path).shape, (1, 1, 16, 16))

        moving = Tensor(np.load(self.image_path(0))[None])
        target = Tensor(np.load(self.image_path(1))[None])
        expected = reg_forward(load_reg_checkpoint(checkpoint), moving, target).u.data
        np.testing.assert_array_equal(field, expected)

    def test_eval(self) -> None:
        """The eval command must write report files and example images"""
        with tempfile.TemporaryDirectory() as tmp:
            result = CliRunner().invoke(deepatlas, [
                'eval', '--checkpoint', join(self.reg_dir, 'reg.ckpt'), '--data', self.data_dir,
                '--mode', 'reg', '--out', tmp, '--class-group', 'inner=2,3'])
            self.assertEqual(result.exit_code, EXIT_OK, result.output)

            with open(join(tmp, 'report.json'), encoding='utf-8') as file:
                report = json.load(file)

            self.assertTrue(isfile(join(tmp, 'images', 'grid.pgm')))

        self.assertEqual(report['count'], 2)
        self.assertEqual(report['metadata']['split'], 'test')
        self.assertIn('inner', report['groups'])
        self.assertIn('reg: Dice', result.output)

    def test_eval_wrong_checkpoint(self) -> None:
        """Evaluating a segmentation checkpoint in reg mode must exit with I/O error code"""
        with tempfile.TemporaryDirectory() as tmp:
            result = CliRunner().invoke(deepatlas, [
                'eval', '--checkpoint', join(self.seg_dir, 'seg.ckpt'), '--data', self.data_dir,
                '--mode', 'reg', '--out', tmp])

        self.assertEqual(result.exit_code, EXIT_IO_ERROR)

    def test_train_errors(self) -> None:
        """The train command must exit with config error code or I/O error code"""
        with tempfile.TemporaryDirectory() as tmp:
            missing = CliRunner().invoke(deepatlas, ['train', '--config',
                                                     join(tmp, 'missing.json')])
            config = join(tmp, 'bad.json')

            with open(config, 'w', encoding='utf-8') as file:
                json.dump({'train': {'protocol': 'da', 'momentum': 0.9},
                           'output': {'directory': tmp}}, file)

            invalid = CliRunner().invoke(deepatlas, ['train', '--config', config])

        self.assertEqual(missing.exit_code, EXIT_IO_ERROR)
        self.assertEqual(invalid.exit_code, EXIT_CONFIG_ERROR)
        self.assertIn('momentum', invalid.output)

    def test_gradcheck(self) -> None:
        """The gradcheck command must pass selected checks and reject unknown ones"""
        passed = CliRunner().invoke(deepatlas, ['gradcheck', '--check', 'add', '--check', 'mean'])
        unknown = CliRunner().invoke(deepatlas, ['gradcheck', '--check', 'no_such_check'])
        self.assertEqual(passed.exit_code, EXIT_OK, passed.output)
        self.assertIn('All checks', passed.output)
        self.assertEqual(unknown.exit_code, EXIT_CONFIG_ERROR)

    def test_parse_class_groups(self) -> None:
        """The parse_class_groups method must parse name=k1,k2 values"""
        self.assertEqual(parse_class_groups(('bones=1,3', 'cartilages=2,4')),
                         {'bones': [1, 3], 'cartilages': [2, 4]})
