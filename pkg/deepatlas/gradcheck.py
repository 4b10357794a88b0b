# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Finite-difference verification of every differentiable operation.

Each check builds a scalar function of a few trainable tensors from a seeded
generator, takes its tape gradient and compares sampled entries against
central differences. Inputs are placed away from kinks (zero for LeakyReLU,
ties for max, integer sample positions for linear warping).
"""
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .imageops import DisplacementField, voxel_scale, warp
from .losses import (AS_PRINTED, CONVENTIONAL, LossWeights, PairLabeling, bending_energy,
                     diffusion_energy, ncc_loss, registration_objective, segmentation_objective,
                     soft_dice_loss)
from .nets import init_reg_net, init_seg_net, reg_forward, seg_forward
from .tensor import (GradientTape, Tensor, concat, conv_nd, elementwise, getitem, max_pool,
                     parameter, reduce, reshape, softmax, stack, upsample_nearest)

FD_STEP = 1e-5
GRAD_TOLERANCE = 1e-4
GRAD_FLOOR = 1e-4
INSTANCES = 5
SAMPLES_PER_TENSOR = 8

Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


@dataclass
class CheckResult:
    """Worst relative error of one named check over all instances"""
    name: str
    worst_error: float
    instances: int

    @property
    def passed(self) -> bool:
        """Error below tolerance"""
        return self.worst_error < GRAD_TOLERANCE


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| / max(|a|, |n|, floor)"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * weights).sum()


def _away_from_zero(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.2, 1.0, size=shape)


def _distinct(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Values pairwise at least 0.05 apart"""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.05 + rng.uniform(0, 0.01)).reshape(shape)


def generic_field(rng: np.random.Generator, batch: int,
                  spatial: Sequence[int]) -> np.ndarray:
    """Displacement whose sample positions lie strictly inside cells, away from grid lines"""
    rank = len(spatial)
    index = np.indices(spatial, dtype=float)[None]
    scale = voxel_scale(spatial).reshape((1, -1) + (1,) * rank)
    extent = np.array(spatial).reshape((1, -1) + (1,) * rank)
    shape = (batch, rank) + tuple(spatial)
    cell = np.floor(rng.uniform(0, 1, size=shape) * (extent - 1))
    pos = cell + rng.uniform(0.2, 0.8, size=shape)
    return (pos - index) / scale


def _unary(op: str, positive: bool = False) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        a = parameter(rng.uniform(0.5, 2.0, (3, 4)) if positive else _away_from_zero(rng, (3, 4)))
        w = rng.normal(size=(3, 4))
        return lambda: _weighted_sum(elementwise(op, a, alpha=0.2), w), [a]

    return build


def _binary(op: str) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        a = parameter(rng.normal(size=(3, 4)))
        b = parameter(rng.uniform(0.5, 2.0, (1, 4)))
        w = rng.normal(size=(3, 4))
        return lambda: _weighted_sum(elementwise(op, a, b), w), [a, b]

    return build


def _reduce(op: str) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        a = parameter(_distinct(rng, (3, 4, 5)))
        w = rng.normal(size=(3, 5))
        return lambda: _weighted_sum(reduce(op, a, axes=1), w), [a]

    return build


def _shape_ops(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    a = parameter(rng.normal(size=(2, 3, 4)))
    b = parameter(rng.normal(size=(2, 3, 4)))
    w = rng.normal(size=(2, 6, 2))

    def fn() -> Tensor:
        joined = concat([getitem(a, (slice(None), slice(None), slice(0, 2))),
                         getitem(b, (slice(None), slice(None), slice(2, 4)))], axis=1)
        stacked = stack([a, b], axis=0).sum(0)
        return _weighted_sum(reshape(joined, (2, 6, 2)), w) + (stacked * stacked).sum()

    return fn, [a, b]


def _conv(rank: int, stride: int, padding: int) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        x = parameter(rng.normal(size=(2, 2) + (6,) * rank))
        k = parameter(rng.normal(size=(3, 2) + (3,) * rank))
        b = parameter(rng.normal(size=3))
        out_shape = conv_nd(x.detach(), k.detach(), b.detach(), stride, padding).shape
        w = rng.normal(size=out_shape)
        return lambda: _weighted_sum(conv_nd(x, k, b, stride, padding), w), [x, k, b]

    return build


def _max_pool(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    x = parameter(_distinct(rng, (2, 2, 6, 6)))
    w = rng.normal(size=(2, 2, 3, 3))
    return lambda: _weighted_sum(max_pool(x, 2), w), [x]


def _upsample(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    x = parameter(rng.normal(size=(2, 2, 3, 3)))
    w = rng.normal(size=(2, 2, 6, 6))
    return lambda: _weighted_sum(upsample_nearest(x, 2), w), [x]


def _softmax(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    x = parameter(rng.normal(size=(2, 4, 5)))
    w = rng.normal(size=(2, 4, 5))
    return lambda: _weighted_sum(softmax(x, axis=1), w), [x]


def _warp(rank: int) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        spatial = (7,) * rank
        image = parameter(rng.normal(size=(2, 2) + spatial))
        u = parameter(generic_field(rng, 2, spatial))
        w = rng.normal(size=(2, 2) + spatial)
        return lambda: _weighted_sum(warp(image, DisplacementField(u)), w), [image, u]

    return build


def _probabilities(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    logits = rng.normal(size=shape)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _ncc(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    a = parameter(rng.uniform(size=(2, 1, 6, 6)))
    b = parameter(rng.uniform(size=(2, 1, 6, 6)))
    return lambda: ncc_loss(a, b), [a, b]


def _dice(variant: str) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        s = parameter(_probabilities(rng, (2, 3, 5, 5)))
        t = parameter(_probabilities(rng, (2, 3, 5, 5)))
        return lambda: soft_dice_loss(s, t, variant), [s, t]

    return build


def _smoothness(kind: str) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        u = parameter(rng.normal(scale=0.1, size=(2, 2, 6, 5)))
        energy = bending_energy if kind == 'bending' else diffusion_energy
        return lambda: energy(DisplacementField(u)), [u]

    return build


def _registration(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    spatial = (7, 7)
    moving = parameter(rng.uniform(size=(1, 1) + spatial))
    target = Tensor(rng.uniform(size=(1, 1) + spatial))
    u = parameter(generic_field(rng, 1, spatial))
    seg_m = parameter(_probabilities(rng, (1, 3) + spatial))
    seg_t = Tensor(_probabilities(rng, (1, 3) + spatial))
    weights = LossWeights(lambda_r=0.01, lambda_a=3.0)
    return (lambda: registration_objective(moving, target, DisplacementField(u), weights,
                                           seg_m, seg_t), [moving, u, seg_m])


def _segmentation(moving_labeled: bool, target_labeled: bool) -> Builder:
    def build(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
        spatial = (6, 6)
        logits_m = parameter(rng.normal(size=(1, 3) + spatial))
        logits_t = parameter(rng.normal(size=(1, 3) + spatial))
        seg_m = Tensor(_probabilities(rng, (1, 3) + spatial)) if moving_labeled else None
        seg_t = Tensor(_probabilities(rng, (1, 3) + spatial)) if target_labeled else None
        deformation = DisplacementField(Tensor(generic_field(rng, 1, spatial)))
        labeling = PairLabeling(moving_labeled, target_labeled)

        def fn() -> Tensor:
            return segmentation_objective(deformation, labeling, LossWeights(),
                                          softmax(logits_m), softmax(logits_t), seg_m, seg_t)

        return fn, [logits_m, logits_t]

    return build


def _seg_net(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    params = init_seg_net(depth=1, width=2, classes=3, dim=2, seed=int(rng.integers(1 << 30)))
    image = Tensor(rng.uniform(size=(1, 1, 8, 8)))
    target = Tensor(_probabilities(rng, (1, 3, 8, 8)))
    return lambda: soft_dice_loss(seg_forward(params, image), target), params.parameters()


def _reg_net(rng: np.random.Generator) -> Tuple[Callable[[], Tensor], List[Tensor]]:
    params = init_reg_net(depth=1, width=2, dim=2, seed=int(rng.integers(1 << 30)))
    params.tensors['head.w'].data[...] = rng.normal(scale=0.05,
                                                    size=params.tensors['head.w'].shape)
    moving = Tensor(rng.uniform(size=(1, 1, 8, 8)))
    target = Tensor(rng.uniform(size=(1, 1, 8, 8)))
    return lambda: ncc_loss(warp(moving, reg_forward(params, moving, target)), target), \
        params.parameters()


CHECKS: Dict[str, Builder] = {
    'add': _binary('add'),
    'sub': _binary('sub'),
    'mul': _binary('mul'),
    'div': _binary('div'),
    'neg': _unary('neg'),
    'exp': _unary('exp'),
    'log': _unary('log', positive=True),
    'sqrt': _unary('sqrt', positive=True),
    'leaky_relu': _unary('leaky_relu'),
    'sum': _reduce('sum'),
    'mean': _reduce('mean'),
    'max': _reduce('max'),
    'shape_ops': _shape_ops,
    'conv_nd_1d': _conv(1, 1, 1),
    'conv_nd_2d': _conv(2, 2, 1),
    'conv_nd_3d': _conv(3, 1, 0),
    'max_pool': _max_pool,
    'upsample_nearest': _upsample,
    'softmax': _softmax,
    'warp_1d': _warp(1),
    'warp_2d': _warp(2),
    'warp_3d': _warp(3),
    'ncc_loss': _ncc,
    'soft_dice_conventional': _dice(CONVENTIONAL),
    'soft_dice_as_printed': _dice(AS_PRINTED),
    'bending_energy': _smoothness('bending'),
    'diffusion_energy': _smoothness('diffusion'),
    'registration_objective': _registration,
    'segmentation_both_labeled': _segmentation(True, True),
    'segmentation_moving_labeled': _segmentation(True, False),
    'segmentation_target_labeled': _segmentation(False, True),
    'segmentation_both_unlabeled': _segmentation(False, False),
    'seg_net': _seg_net,
    'reg_net': _reg_net,
}


def _numeric(fn: Callable[[], Tensor], tensor: Tensor, index: Tuple[int, ...]) -> float:
    original = tensor.data[index]
    tensor.data[index] = original + FD_STEP
    plus = fn().item()
    tensor.data[index] = original - FD_STEP
    minus = fn().item()
    tensor.data[index] = original
    return (plus - minus) / (2 * FD_STEP)


def check_gradient(name: str, build: Builder, seed: int = 0,
                   instances: int = INSTANCES) -> CheckResult:
    """Compares tape gradients with central differences on seeded instances"""
    worst = 0.0

    for instance in range(instances):
        rng = np.random.default_rng([seed, instance, zlib.crc32(name.encode())])
        fn, inputs = build(rng)

        for tensor in inputs:
            tensor.zero_grad()

        with GradientTape() as tape:
            loss = fn()
            tape.backward(loss)

        for tensor in inputs:
            analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            count = min(SAMPLES_PER_TENSOR, tensor.size)

            for flat in rng.choice(tensor.size, size=count, replace=False):
                index = np.unravel_index(int(flat), tensor.shape)
                error = relative_error(float(analytic[index]), _numeric(fn, tensor, index))
                worst = max(worst, error)

    return CheckResult(name, worst, instances)


def run_gradcheck(seed: int = 0, names: Sequence[str] = ()) -> List[CheckResult]:
    """Runs selected checks, all by default, in a stable order"""
    selected = list(names) if names else list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]

    if unknown:
        raise ValueError(f'Unknown gradient checks: {unknown}')

    return [check_gradient(name, CHECKS[name], seed) for name in selected]
