"""Test global_config.py module"""
from unittest import TestCase, mock

from deepatlas.global_config import THREADS_ENV_NAME, get_checkpoint_path, \
    get_metric_log_path, get_reports_dir, get_thread_count


class GlobalConfigTest(TestCase):
    """Test global_config.py module"""

    def test_get_reports_dir(self) -> None:
        """The get_reports_dir method must return report directory of split and mode"""
        self.assertEqual(get_reports_dir('run', 'test', 'seg'), 'run/reports/test_seg')

    def test_get_checkpoint_path(self) -> None:
        """The get_checkpoint_path method must return path inside run directory"""
        self.assertEqual(get_checkpoint_path('run', 'seg.ckpt'), 'run/seg.ckpt')

    def test_get_metric_log_path(self) -> None:
        """The get_metric_log_path method must return path to metrics.jsonl"""
        self.assertEqual(get_metric_log_path('run'), 'run/metrics.jsonl')

    def test_get_thread_count(self) -> None:
        """The get_thread_count method must read a positive count, 1 by default"""
        with mock.patch.dict('os.environ', {THREADS_ENV_NAME: '4'}):
            self.assertEqual(get_thread_count(), 4)

        with mock.patch.dict('os.environ', {THREADS_ENV_NAME: 'many'}):
            self.assertEqual(get_thread_count(), 1)

        with mock.patch.dict('os.environ', {THREADS_ENV_NAME: '-3'}):
            self.assertEqual(get_thread_count(), 1)

        with mock.patch.dict('os.environ', {THREADS_ENV_NAME: ''}):
            self.assertEqual(get_thread_count(), 1)
