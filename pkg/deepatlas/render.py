# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""Plain PGM (P2) rendering of images, label maps and deformation grids"""

from typing import Union

import numpy as np

from .imageops import DisplacementField, warp
from .tensor import Tensor

MAX_GRAY = 255
LABEL_GRAY_LEVELS = (0, 255, 170, 85, 212, 42, 127, 233)
GRID_SPACING = 8
VALUES_PER_LINE = 16


def _as_array(value: Union[Tensor, np.ndarray]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def displayed_slice(array: np.ndarray) -> np.ndarray:
    """Drops leading singleton axes; takes the middle slice of the first axis in 3-D"""
    while array.ndim > 2 and array.shape[0] == 1:
        array = array[0]

    if array.ndim == 3:
        array = array[array.shape[0] // 2]

    if array.ndim == 1:
        array = array[None]

    if array.ndim != 2:
        raise ValueError(f'Cannot render array of shape {array.shape}')

    return array


def to_gray(array: np.ndarray, labels: bool = False) -> np.ndarray:
    """Maps intensities (min-max) or class labels (fixed levels) to 0..255"""
    if labels:
        levels = np.asarray(LABEL_GRAY_LEVELS)
        return levels[np.rint(array).astype(np.int64) % len(levels)]

    low, high = float(array.min()), float(array.max())

    if high <= low:
        return np.zeros(array.shape, dtype=np.int64)

    return np.rint((array - low) / (high - low) * MAX_GRAY).astype(np.int64)


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Writes 2-D array of 0..255 values as plain PGM"""
    height, width = gray.shape

    with open(path, mode='w', encoding='ascii') as file:
        file.write(f'P2\n{width} {height}\n{MAX_GRAY}\n')

        for row in gray:
            for start in range(0, width, VALUES_PER_LINE):
                file.write(' '.join(str(int(v)) for v in row[start:start + VALUES_PER_LINE]))
                file.write('\n')


def render_slice(tensor: Union[Tensor, np.ndarray], path: str, labels: bool = False) -> None:
    """Renders full 2-D image or middle slice of 3-D image"""
    write_pgm(path, to_gray(displayed_slice(_as_array(tensor)), labels))


def grid_image(spatial_shape: tuple, spacing: int = GRID_SPACING) -> np.ndarray:
    """Image of regular grid lines [1, 1, spatial...]"""
    lines = np.zeros(spatial_shape)

    for axis, extent in enumerate(spatial_shape):
        index = [slice(None)] * len(spatial_shape)
        index[axis] = slice(0, extent, spacing)
        lines[tuple(index)] = 1.0

    return lines[None, None]


def render_grid(field: DisplacementField, path: str, spacing: int = GRID_SPACING) -> None:
    """Renders a regular grid warped by the first field of the batch"""
    first = DisplacementField(field.u.detach()[0:1])
    warped = warp(Tensor(grid_image(first.spatial_shape, spacing)), first)
    render_slice(warped, path)
