# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Misc utility functions.
"""
import io
import json
from concurrent.futures import ThreadPoolExecutor
from os import makedirs
from os.path import isdir, realpath, expandvars, expanduser
from typing import Any, Callable, List, Sequence, TypeVar

import numpy as np

from .global_config import get_thread_count

T = TypeVar('T')
R = TypeVar('R')


def create_dir_if_not_exist(dir_name: str) -> None:
    """Creates given directory with all parents if it is not exist."""
    if not isdir(dir_name):
        makedirs(dir_name, mode=0o755, exist_ok=True)


def expand_path(path: str) -> str:
    """Performs full path expansion"""
    return realpath(expandvars(expanduser(path)))


def read_json(file_name: str) -> Any:
    """Returns parsed content of given json file"""
    with open(file_name, mode='r', encoding='utf-8') as file:
        return json.load(file)


def write_json(file_name: str, data: Any) -> None:
    """Writes data to json file with stable key order"""
    with open(file_name, mode='w', encoding='utf-8') as file:
        json.dump(data, file, indent=2, sort_keys=True)
        file.write('\n')


def to_little_endian(array: np.ndarray) -> np.ndarray:
    """Returns C-ordered little-endian copy of array if necessary"""
    dtype = array.dtype.newbyteorder('<') if array.dtype.byteorder == '>' else array.dtype
    return np.ascontiguousarray(array, dtype=dtype)


def save_npy(file_name: str, array: np.ndarray) -> None:
    """Saves array as NPY file, little-endian and C-order"""
    np.save(file_name, to_little_endian(array), allow_pickle=False)


def load_npy(file_name: str) -> np.ndarray:
    """Loads NPY file without pickle support"""
    return np.load(file_name, allow_pickle=False)


def npy_bytes(array: np.ndarray) -> bytes:
    """Serializes array to NPY bytes"""
    buffer = io.BytesIO()
    np.lib.format.write_array(buffer, to_little_endian(array), allow_pickle=False)
    return buffer.getvalue()


def npy_from_bytes(data: bytes) -> np.ndarray:
    """Deserializes NPY bytes"""
    return np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)


def parallel_map(function: Callable[[T], R], items: Sequence[T]) -> List[R]:
    """Maps function over items with DEEPATLAS_THREADS workers, results in input order."""
    workers = get_thread_count()

    if workers == 1 or len(items) < 2:
        return [function(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(function, items))
