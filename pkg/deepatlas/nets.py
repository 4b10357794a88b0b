# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Segmentation and registration networks.

Both networks are fully convolutional encoder-decoders with skip connections
built from tensor primitives. Parameters are plain dicts of named tensors.
"""
from dataclasses import dataclass, field
from typing import Any, ClassVar, Dict, List, Optional, Tuple

import numpy as np

from .global_config import FLOAT_DTYPE
from .imageops import DisplacementField
from .tensor import (Tensor, ShapeError, as_tensor, concat, conv_nd, leaky_relu, max_pool,
                     parameter, softmax, upsample_nearest)

SEG_KIND = 'seg'
REG_KIND = 'reg'

DEF_DEPTH = 3
DEF_WIDTH = 16
DEF_CLASSES = 4
DEF_DIM = 2
KERNEL_SIZE = 3
LEAKY_SLOPE = 0.2


@dataclass
class NetParams:
    """Hyperparameters and named weight tensors of a network"""
    kind: ClassVar[str] = ''
    depth: int = DEF_DEPTH
    width: int = DEF_WIDTH
    dim: int = DEF_DIM
    tensors: Dict[str, Tensor] = field(default_factory=dict)

    def hyperparams(self) -> Dict[str, Any]:
        """Hyperparameters stored in checkpoint manifests"""
        return {'kind': self.kind, 'depth': self.depth, 'width': self.width, 'dim': self.dim}

    def names(self) -> List[str]:
        """Tensor names in stable order"""
        return sorted(self.tensors)

    def parameters(self) -> List[Tensor]:
        """Tensors in stable order"""
        return [self.tensors[name] for name in self.names()]

    def copy(self) -> 'NetParams':
        """Deep copy with trainable tensors"""
        res = _copy_params(self)
        res.tensors = {name: parameter(t.data.copy()) for name, t in self.tensors.items()}
        return res


@dataclass
class SegNetParams(NetParams):
    """Segmentation U-Net: image [N,1,...] -> class probabilities [N,K,...]"""
    kind: ClassVar[str] = SEG_KIND
    classes: int = DEF_CLASSES

    def hyperparams(self) -> Dict[str, Any]:
        return dict(super().hyperparams(), classes=self.classes)


@dataclass
class RegNetParams(NetParams):
    """Registration network: image pair -> displacement field [N,d,...]"""
    kind: ClassVar[str] = REG_KIND


def _copy_params(params: NetParams) -> NetParams:
    if isinstance(params, SegNetParams):
        return SegNetParams(params.depth, params.width, params.dim, {}, params.classes)

    return RegNetParams(params.depth, params.width, params.dim, {})


def _check_hyperparams(depth: int, width: int, dim: int) -> None:
    if depth < 1:
        raise ValueError(f'Network depth must be positive, got {depth}')

    if width < 1:
        raise ValueError(f'Network width must be positive, got {width}')

    if dim not in (1, 2, 3):
        raise ValueError(f'Spatial rank must be 1, 2 or 3, got {dim}')


def _conv_weights(rng: np.random.Generator, c_in: int, c_out: int, dim: int,
                  kernel: int = KERNEL_SIZE, zero: bool = False) -> Tuple[Tensor, Tensor]:
    """Fan-in scaled uniform init for LeakyReLU(0.2) layers; zero head if requested"""
    shape = (c_out, c_in) + (kernel,) * dim

    if zero:
        weight = np.zeros(shape, dtype=FLOAT_DTYPE)
    else:
        fan_in = c_in * kernel ** dim
        bound = np.sqrt(6.0 / ((1.0 + LEAKY_SLOPE ** 2) * fan_in))
        weight = rng.uniform(-bound, bound, size=shape)

    return parameter(weight), parameter(np.zeros(c_out, dtype=FLOAT_DTYPE))


def _add_conv(tensors: Dict[str, Tensor], name: str, rng: np.random.Generator,
              c_in: int, c_out: int, dim: int, kernel: int = KERNEL_SIZE,
              zero: bool = False) -> None:
    weight, bias = _conv_weights(rng, c_in, c_out, dim, kernel, zero)
    tensors[f'{name}.w'] = weight
    tensors[f'{name}.b'] = bias


def seg_widths(depth: int, width: int) -> List[int]:
    """Channel widths of segmentation levels 0..depth (the last is the bottleneck)"""
    return [width * 2 ** level for level in range(depth + 1)]


def reg_widths(depth: int, width: int) -> List[int]:
    """Channel widths of registration levels 0..depth"""
    return [width] + [2 * width] * depth


def init_seg_net(depth: int = DEF_DEPTH, width: int = DEF_WIDTH, classes: int = DEF_CLASSES,
                 dim: int = DEF_DIM, seed: int = 0) -> SegNetParams:
    """Creates segmentation network with seeded initialization"""
    _check_hyperparams(depth, width, dim)

    if classes < 2:
        raise ValueError(f'Segmentation needs at least 2 classes, got {classes}')

    rng = np.random.default_rng([seed, 0])
    widths = seg_widths(depth, width)
    tensors: Dict[str, Tensor] = {}
    c_in = 1

    for level in range(depth + 1):
        _add_conv(tensors, f'enc{level}.conv1', rng, c_in, widths[level], dim)
        _add_conv(tensors, f'enc{level}.conv2', rng, widths[level], widths[level], dim)
        c_in = widths[level]

    for level in reversed(range(depth)):
        _add_conv(tensors, f'dec{level}.conv1', rng, widths[level + 1] + widths[level],
                  widths[level], dim)
        _add_conv(tensors, f'dec{level}.conv2', rng, widths[level], widths[level], dim)

    _add_conv(tensors, 'head', rng, widths[0], classes, dim, kernel=1)
    return SegNetParams(depth, width, dim, tensors, classes)


def init_reg_net(depth: int = DEF_DEPTH, width: int = DEF_WIDTH, dim: int = DEF_DIM,
                 seed: int = 0) -> RegNetParams:
    """Creates registration network; displacement head starts at zero"""
    _check_hyperparams(depth, width, dim)
    rng = np.random.default_rng([seed, 1])
    widths = reg_widths(depth, width)
    tensors: Dict[str, Tensor] = {}
    _add_conv(tensors, 'enc0', rng, 2, widths[0], dim)

    for level in range(1, depth + 1):
        _add_conv(tensors, f'enc{level}', rng, widths[level - 1], widths[level], dim)

    for level in reversed(range(depth)):
        _add_conv(tensors, f'dec{level}', rng, widths[level + 1] + widths[level],
                  widths[level], dim)

    _add_conv(tensors, 'head', rng, widths[0], dim, dim, zero=True)
    return RegNetParams(depth, width, dim, tensors)


def _conv(params: NetParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    weight = params.tensors[f'{name}.w']
    return conv_nd(x, weight, params.tensors[f'{name}.b'], stride=stride,
                   padding=weight.shape[-1] // 2)


def _block(params: NetParams, name: str, x: Tensor) -> Tensor:
    x = leaky_relu(_conv(params, f'{name}.conv1', x), LEAKY_SLOPE)
    return leaky_relu(_conv(params, f'{name}.conv2', x), LEAKY_SLOPE)


def _check_input(params: NetParams, image: Tensor, channels: int) -> None:
    if image.ndim != params.dim + 2 or image.shape[1] != channels:
        raise ShapeError(f'Network expects [N, {channels}] + {params.dim} spatial axes, '
                         f'got {image.shape}')

    factor = 2 ** params.depth

    if any(n % factor for n in image.shape[2:]):
        raise ShapeError(f'Spatial extents {image.shape[2:]} must be divisible by {factor}')


def seg_forward(params: SegNetParams, image: Tensor) -> Tensor:
    """Probabilistic segmentation [N, K, spatial...]"""
    x = as_tensor(image)
    _check_input(params, x, 1)
    skips: List[Tensor] = []

    for level in range(params.depth):
        x = _block(params, f'enc{level}', x)
        skips.append(x)
        x = max_pool(x, 2)

    x = _block(params, f'enc{params.depth}', x)

    for level in reversed(range(params.depth)):
        x = concat([upsample_nearest(x, 2), skips[level]], axis=1)
        x = _block(params, f'dec{level}', x)

    return softmax(_conv(params, 'head', x), axis=1)


def reg_forward(params: RegNetParams, moving: Tensor, target: Tensor) -> DisplacementField:
    """Displacement field u mapping target space into moving space"""
    moving, target = as_tensor(moving), as_tensor(target)

    if moving.shape != target.shape:
        raise ShapeError(f'Moving shape {moving.shape} differs from target shape {target.shape}')

    _check_input(params, moving, 1)
    x = leaky_relu(_conv(params, 'enc0', concat([moving, target], axis=1)), LEAKY_SLOPE)
    skips = [x]

    for level in range(1, params.depth + 1):
        x = leaky_relu(_conv(params, f'enc{level}', x, stride=2), LEAKY_SLOPE)
        skips.append(x)

    for level in reversed(range(params.depth)):
        x = concat([upsample_nearest(x, 2), skips[level]], axis=1)
        x = leaky_relu(_conv(params, f'dec{level}', x), LEAKY_SLOPE)

    return DisplacementField(_conv(params, 'head', x))


def parameter_count(params: NetParams) -> int:
    """Total number of scalar weights"""
    return sum(t.size for t in params.tensors.values())


def describe(params: NetParams) -> Dict[str, Any]:
    """Hyperparameters, parameter count and tensor shapes"""
    return dict(params.hyperparams(), parameters=parameter_count(params),
                tensors={name: list(params.tensors[name].shape) for name in params.names()})


def init_from_hyperparams(hyperparams: Dict[str, Any], seed: int = 0) -> NetParams:
    """Creates network of kind given in hyperparams"""
    kind = hyperparams.get('kind')
    depth = int(hyperparams['depth'])
    width = int(hyperparams['width'])
    dim = int(hyperparams['dim'])

    if kind == SEG_KIND:
        return init_seg_net(depth, width, int(hyperparams['classes']), dim, seed)

    if kind == REG_KIND:
        return init_reg_net(depth, width, dim, seed)

    raise ValueError(f'Unknown network kind: {kind}')
