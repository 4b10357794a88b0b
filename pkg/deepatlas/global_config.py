# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Global configuration constants, variables and functions.
"""

from os import environ
from os.path import join

import numpy as np

FLOAT_DTYPE = np.float64
LABEL_DTYPE = np.int64

THREADS_ENV_NAME = 'DEEPATLAS_THREADS'
DEF_THREADS = 1

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_FAILURE = 3
EXIT_IO_ERROR = 4

DATASET_MANIFEST_NAME = 'manifest.json'
CHECKPOINT_MANIFEST_NAME = 'manifest.json'
SEG_CHECKPOINT_NAME = 'seg.ckpt'
REG_CHECKPOINT_NAME = 'reg.ckpt'
METRIC_LOG_NAME = 'metrics.jsonl'
REPORT_NAME = 'report.json'
PER_IMAGE_CSV_NAME = 'per_image.csv'
SUMMARY_NAME = 'summary.json'
REPORTS_DIR = 'reports'
IMAGES_DIR = 'images'


def get_thread_count() -> int:
    """Returns number of worker threads allowed by DEEPATLAS_THREADS"""
    value = environ.get(THREADS_ENV_NAME, '')

    try:
        count = int(value) if value else DEF_THREADS
    except ValueError:
        count = DEF_THREADS

    return max(1, count)


def get_reports_dir(out_dir: str, split_name: str, mode: str) -> str:
    """Returns full path to report directory for given split and mode."""
    return join(out_dir, REPORTS_DIR, f'{split_name}_{mode}')


def get_checkpoint_path(out_dir: str, name: str) -> str:
    """Returns full path to checkpoint file inside run directory."""
    return join(out_dir, name)


def get_metric_log_path(out_dir: str) -> str:
    """Returns full path to metric log of a run."""
    return join(out_dir, METRIC_LOG_NAME)
