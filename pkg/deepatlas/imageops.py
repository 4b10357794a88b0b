# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Differentiable spatial operations on images.

Coordinates are normalized: every image axis spans [-1, 1]. Component i of a
displacement field moves samples along array axis i (axis order, not x/y/z).
"""
from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .global_config import FLOAT_DTYPE
from .tensor import Tensor, ShapeError, Grads, as_tensor, record_op, stack

LINEAR = 'linear'
NEAREST = 'nearest'
INTERPOLATIONS = (LINEAR, NEAREST)


@dataclass
class DeformationMap:
    """Absolute normalized sample coordinates, phi_inv = u + id"""
    phi_inv: Tensor


@dataclass
class DisplacementField:
    """Per-voxel displacement u [N, d, spatial...] in normalized coordinates"""
    u: Tensor

    def __post_init__(self) -> None:
        if self.u.ndim < 3:
            raise ShapeError(f'Displacement field needs [N, d, spatial...], got {self.u.shape}')

        if self.u.shape[1] != self.u.ndim - 2:
            raise ShapeError(f'Displacement field channel count {self.u.shape[1]} '
                             f'differs from spatial rank {self.u.ndim - 2}')

        if not np.all(np.isfinite(self.u.data)):
            raise ValueError('Displacement field has non-finite entries')

    @property
    def rank(self) -> int:
        """Spatial rank d"""
        return self.u.ndim - 2

    @property
    def spatial_shape(self) -> Tuple[int, ...]:
        """Spatial extents"""
        return self.u.shape[2:]

    def deformation_map(self) -> DeformationMap:
        """Returns phi_inv = u + id"""
        return DeformationMap(self.u + identity_grid(self.spatial_shape).data[None])

    def detach(self) -> 'DisplacementField':
        """Returns same field as a constant"""
        return DisplacementField(self.u.detach())


def zero_field(batch: int, spatial_shape: Sequence[int]) -> DisplacementField:
    """Identity transform for given batch and spatial shape"""
    shape = (batch, len(spatial_shape)) + tuple(spatial_shape)
    return DisplacementField(Tensor(np.zeros(shape, dtype=FLOAT_DTYPE)))


def identity_grid(spatial_shape: Sequence[int]) -> Tensor:
    """Normalized coordinates [d, spatial...]; extent-1 axes get coordinate 0"""
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in spatial_shape]
    return Tensor(np.stack(np.meshgrid(*axes, indexing='ij')))


def voxel_scale(spatial_shape: Sequence[int]) -> np.ndarray:
    """Voxels per normalized unit along every axis, (extent - 1) / 2"""
    return np.array([(n - 1) / 2.0 for n in spatial_shape], dtype=FLOAT_DTYPE)


def _check_warp_args(image: Tensor, field: DisplacementField) -> None:
    if image.ndim != field.u.ndim:
        raise ShapeError(f'Image rank {image.ndim} does not match field rank {field.u.ndim}')

    if image.shape[2:] != field.spatial_shape:
        raise ShapeError(f'Image spatial shape {image.shape[2:]} differs from field '
                         f'spatial shape {field.spatial_shape}')

    if image.shape[0] != field.u.shape[0]:
        raise ShapeError(f'Image batch {image.shape[0]} differs from field batch '
                         f'{field.u.shape[0]}')


def sample_positions(field: DisplacementField) -> np.ndarray:
    """Sample positions in voxel units [N, d, spatial...], before border clamping"""
    spatial = field.spatial_shape
    index = np.indices(spatial, dtype=FLOAT_DTYPE)[None]
    scale = voxel_scale(spatial).reshape((1, -1) + (1,) * len(spatial))
    return index + field.u.data * scale


def _gather(image: np.ndarray, batch_index: np.ndarray, index: List[np.ndarray]) -> np.ndarray:
    """image[n, :, index...] for every output voxel, as [N, C, spatial...]"""
    values = image[(batch_index, slice(None)) + tuple(index)]
    return np.moveaxis(values, -1, 1)


def warp(image: Tensor, field: DisplacementField, interpolation: str = LINEAR) -> Tensor:
    """
    Resamples image at id + u with border clamping.

    Linear mode is differentiable w.r.t. image and field. Nearest mode
    returns a constant and is meant for hard label maps.
    """
    image = as_tensor(image)
    _check_warp_args(image, field)

    if interpolation not in INTERPOLATIONS:
        raise ValueError(f'Unknown interpolation: {interpolation}')

    spatial = field.spatial_shape
    rank = field.rank
    extent = np.array(spatial).reshape((1, -1) + (1,) * rank)
    pos = sample_positions(field)
    clamped = np.clip(pos, 0, extent - 1)
    batch_index = np.arange(image.shape[0]).reshape((-1,) + (1,) * rank)

    if interpolation == NEAREST:
        index = np.floor(clamped + 0.5).astype(np.int64)
        index = np.minimum(index, extent - 1)
        return Tensor(_gather(image.data, batch_index, [index[:, i] for i in range(rank)]))

    low = np.minimum(np.floor(clamped), np.maximum(extent - 2, 0)).astype(np.int64)
    frac = clamped - low
    corners = list(product((0, 1), repeat=rank))
    weights: List[np.ndarray] = []
    values: List[np.ndarray] = []
    indices: List[List[np.ndarray]] = []

    for corner in corners:
        index = [np.minimum(low[:, i] + bit, spatial[i] - 1) for i, bit in enumerate(corner)]
        weight = np.ones_like(frac[:, 0])

        for i, bit in enumerate(corner):
            weight = weight * (frac[:, i] if bit else 1.0 - frac[:, i])

        indices.append(index)
        weights.append(weight)
        values.append(_gather(image.data, batch_index, index))

    out = weights[0][:, None] * values[0]

    for weight, value in zip(weights[1:], values[1:]):
        out = out + weight[:, None] * value

    def adjoint(g: np.ndarray) -> Grads:
        g_image = _image_adjoint(g, image.shape, batch_index, indices, weights) \
            if image.requires_grad else None
        g_field = _field_adjoint(g, pos, frac, corners, values, spatial) \
            if field.u.requires_grad else None
        return g_image, g_field

    return record_op(out, (image, field.u), adjoint)


def _image_adjoint(g: np.ndarray, shape: Tuple[int, ...], batch_index: np.ndarray,
                   indices: List[List[np.ndarray]], weights: List[np.ndarray]) -> np.ndarray:
    """Scatters output gradient back to the sampled voxels"""
    batch, channels = shape[:2]
    spatial = shape[2:]
    voxels = int(np.prod(spatial))
    grad = np.zeros((channels, batch * voxels), dtype=FLOAT_DTYPE)

    for index, weight in zip(indices, weights):
        target = np.ravel_multi_index(tuple(index), spatial) + batch_index * voxels
        target = np.broadcast_to(target, weight.shape).ravel()

        for c in range(channels):
            grad[c] += np.bincount(target, weights=(weight * g[:, c]).ravel(),
                                   minlength=batch * voxels)

    return np.moveaxis(grad.reshape((channels, batch) + spatial), 0, 1)


def _field_adjoint(g: np.ndarray, pos: np.ndarray, frac: np.ndarray,
                   corners: List[Tuple[int, ...]], values: List[np.ndarray],
                   spatial: Tuple[int, ...]) -> np.ndarray:
    """Gradient of linear interpolation w.r.t. displacement; zero where clamped"""
    rank = len(spatial)
    scale = voxel_scale(spatial)
    grad = np.zeros_like(pos)

    for i in range(rank):
        if spatial[i] == 1:
            continue

        d_out = np.zeros_like(values[0])

        for corner, value in zip(corners, values):
            d_weight = np.ones_like(frac[:, 0]) if corner[i] else -np.ones_like(frac[:, 0])

            for j, bit in enumerate(corner):
                if j != i:
                    d_weight = d_weight * (frac[:, j] if bit else 1.0 - frac[:, j])

            d_out = d_out + d_weight[:, None] * value

        inside = (pos[:, i] >= 0) & (pos[:, i] <= spatial[i] - 1)
        grad[:, i] = (g * d_out).sum(axis=1) * inside * scale[i]

    return grad


def _interior_view(u: Tensor, offsets: Dict[int, int]) -> Tensor:
    """Interior block of u shifted by +-1 voxel along selected axes"""
    index = (slice(None), slice(None)) + tuple(
        slice(1 + offsets.get(axis, 0), n - 1 + offsets.get(axis, 0))
        for axis, n in enumerate(u.shape[2:]))
    return u[index]


def spatial_derivatives(field: DisplacementField, order: int) -> Tensor:
    """
    Central differences on interior voxels in normalized coordinates.

    order 1 -> [N, d, d, interior...] with entry [:, i, j] = du_i/dx_j
    order 2 -> [N, d, d, d, interior...] with entry [:, i, j, k] = d2u_i/dx_j dx_k
    """
    if order not in (1, 2):
        raise ValueError(f'Derivative order must be 1 or 2, got {order}')

    spatial = field.spatial_shape

    if any(n < 3 for n in spatial):
        raise ShapeError(f'Derivative stencils need every extent >= 3, got {spatial}')

    u = field.u
    rank = field.rank
    step = [2.0 / (n - 1) for n in spatial]

    if order == 1:
        first = [(_interior_view(u, {j: 1}) - _interior_view(u, {j: -1})) / (2.0 * step[j])
                 for j in range(rank)]
        return stack(first, axis=2)

    center = _interior_view(u, {})
    second: Dict[Tuple[int, int], Tensor] = {}

    for j in range(rank):
        second[j, j] = (_interior_view(u, {j: 1}) - 2.0 * center +
                        _interior_view(u, {j: -1})) / (step[j] ** 2)

        for k in range(j + 1, rank):
            mixed = (_interior_view(u, {j: 1, k: 1}) - _interior_view(u, {j: 1, k: -1}) -
                     _interior_view(u, {j: -1, k: 1}) + _interior_view(u, {j: -1, k: -1}))
            second[j, k] = second[k, j] = mixed / (4.0 * step[j] * step[k])

    rows = [stack([second[j, k] for k in range(rank)], axis=2) for j in range(rank)]
    return stack(rows, axis=2)


def jacobian_determinant(field: DisplacementField) -> Tensor:
    """det(grad phi_inv) per interior voxel [N, interior...]"""
    derivatives = spatial_derivatives(field.detach(), 1).data
    rank = field.rank
    jacobian = derivatives + np.eye(rank).reshape((1, rank, rank) + (1,) * rank)
    matrices = np.moveaxis(np.moveaxis(jacobian, 1, -1), 1, -1)
    return Tensor(np.linalg.det(matrices))


def folding_fraction(field: DisplacementField) -> float:
    """Fraction of interior voxels with non-positive Jacobian determinant"""
    det = jacobian_determinant(field).data
    return float(np.mean(det <= 0))
