# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Scalar training objectives.

Intensity similarity (global NCC), soft multi-class Dice for anatomy
similarity and supervised segmentation, bending/diffusion regularization,
the weakly supervised registration objective and the four-case
semi-supervised segmentation objective.
"""
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .imageops import DisplacementField, spatial_derivatives, warp
from .log_utils import log_warning
from .tensor import Tensor, ShapeError, as_tensor, sqrt

CONVENTIONAL = 'conventional'
AS_PRINTED = 'as_printed'
DICE_VARIANTS = (CONVENTIONAL, AS_PRINTED)

BENDING = 'bending'
DIFFUSION = 'diffusion'
REGULARIZERS = (BENDING, DIFFUSION)

DICE_EPS = 1e-6
NCC_EPS = 1e-10


@dataclass
class LossWeights:
    """Weights of the regularity, anatomy and supervised terms"""
    lambda_r: float = 20000.0
    lambda_a: float = 3.0
    lambda_sp: float = 3.0

    def __post_init__(self) -> None:
        for name in ('lambda_r', 'lambda_a', 'lambda_sp'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} must be non-negative, got {getattr(self, name)}')


@dataclass(frozen=True)
class PairLabeling:
    """Manual segmentation availability of a moving/target pair"""
    moving_labeled: bool
    target_labeled: bool

    @property
    def both_labeled(self) -> bool:
        """Both members carry manual segmentations"""
        return self.moving_labeled and self.target_labeled

    @property
    def both_unlabeled(self) -> bool:
        """Neither member carries a manual segmentation"""
        return not self.moving_labeled and not self.target_labeled


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f'{what}: shapes {a.shape} and {b.shape} differ')


def ncc_loss(warped: Tensor, target: Tensor) -> Tensor:
    """1 - NCC computed globally per image, averaged over the batch; in [0, 2]"""
    a, b = as_tensor(warped), as_tensor(target)
    _check_same_shape(a, b, 'ncc_loss')
    axes = tuple(range(1, a.ndim))
    centered_a = a - a.mean(axes, keepdims=True)
    centered_b = b - b.mean(axes, keepdims=True)
    cross = (centered_a * centered_b).sum(axes)
    var_a = (centered_a * centered_a).sum(axes)
    var_b = (centered_b * centered_b).sum(axes)

    if np.any(var_a.data == 0) or np.any(var_b.data == 0):
        log_warning('NCC of a constant image is undefined, the loss is kept finite by epsilon')

    ncc = cross / sqrt(var_a * var_b + NCC_EPS)
    return (1.0 - ncc).mean()


def soft_dice_loss(s: Tensor, s_star: Tensor, variant: str = CONVENTIONAL) -> Tensor:
    """
    Soft multi-class Dice loss of [N, K, spatial...] maps.

    The conventional variant has the factor 2 in the numerator, so perfect
    overlap scores 0; as_printed omits it and perfect hard overlap scores 0.5.
    """
    a, b = as_tensor(s), as_tensor(s_star)

    if a.ndim < 3 or b.ndim < 3 or a.shape[1] != b.shape[1]:
        raise ShapeError(f'soft_dice_loss: class counts of {a.shape} and {b.shape} differ')

    _check_same_shape(a, b, 'soft_dice_loss')

    if variant not in DICE_VARIANTS:
        raise ValueError(f'Unknown Dice variant: {variant}')

    factor = 2.0 if variant == CONVENTIONAL else 1.0
    spatial = tuple(range(2, a.ndim))
    overlap = (a * b).sum(spatial)
    total = a.sum(spatial) + b.sum(spatial)
    score = (factor * overlap + DICE_EPS) / (total + DICE_EPS)
    return 1.0 - score.mean()


def bending_energy(field: DisplacementField) -> Tensor:
    """Mean over interior voxels (and batch) of sum_i ||H(u_i)||_F^2"""
    hessian = spatial_derivatives(field, 2)
    return (hessian * hessian).sum((1, 2, 3)).mean()


def diffusion_energy(field: DisplacementField) -> Tensor:
    """Mean over interior voxels (and batch) of sum_i ||grad u_i||^2"""
    gradient = spatial_derivatives(field, 1)
    return (gradient * gradient).sum((1, 2)).mean()


def regularization(field: DisplacementField, regularizer: str = BENDING) -> Tensor:
    """Regularity loss selected by name"""
    if regularizer == BENDING:
        return bending_energy(field)

    if regularizer == DIFFUSION:
        return diffusion_energy(field)

    raise ValueError(f'Unknown regularizer: {regularizer}')


def _value(tensor: Optional[Tensor]) -> float:
    return tensor.item() if tensor is not None else 0.0


@dataclass
class RegistrationLoss:
    """Components of the registration objective"""
    similarity: Tensor
    regularity: Tensor
    anatomy: Optional[Tensor]
    total: Tensor

    def report(self) -> Dict[str, float]:
        """Component values for metric logs"""
        return {'L_i': _value(self.similarity), 'L_r': _value(self.regularity),
                'L_a': _value(self.anatomy), 'total': _value(self.total)}


@dataclass
class SegmentationLoss:
    """Components of the semi-supervised segmentation objective"""
    anatomy: Tensor
    supervised: Tensor
    total: Tensor

    def report(self) -> Dict[str, float]:
        """Component values for metric logs"""
        return {'L_a': _value(self.anatomy), 'L_sp': _value(self.supervised),
                'total': _value(self.total)}


def registration_terms(moving: Tensor, target: Tensor, field: DisplacementField,
                       weights: LossWeights,
                       seg_moving: Optional[Tensor] = None,
                       seg_target: Optional[Tensor] = None,
                       dice_variant: str = CONVENTIONAL,
                       regularizer: str = BENDING) -> RegistrationLoss:
    """L_i(I_m o phi_inv, I_t) + lambda_r L_r + lambda_a L_a(S_m o phi_inv, S_t)"""
    similarity = ncc_loss(warp(moving, field), target)
    regularity = regularization(field, regularizer)
    total = similarity + weights.lambda_r * regularity
    anatomy = None

    if seg_moving is not None and seg_target is not None:
        anatomy = soft_dice_loss(warp(seg_moving, field), seg_target, dice_variant)
        total = total + weights.lambda_a * anatomy

    return RegistrationLoss(similarity, regularity, anatomy, total)


def registration_objective(moving: Tensor, target: Tensor, field: DisplacementField,
                           weights: LossWeights,
                           seg_moving: Optional[Tensor] = None,
                           seg_target: Optional[Tensor] = None,
                           dice_variant: str = CONVENTIONAL,
                           regularizer: str = BENDING) -> Tensor:
    """Weighted registration loss; anatomy term omitted without both segmentations"""
    return registration_terms(moving, target, field, weights, seg_moving, seg_target,
                              dice_variant, regularizer).total


def _require(value: Optional[Tensor], name: str) -> Tensor:
    if value is None:
        raise ValueError(f'{name} is required for this labeling')

    return value


def segmentation_terms(field: DisplacementField, labeling: PairLabeling, weights: LossWeights,
                       moving_pred: Optional[Tensor] = None,
                       target_pred: Optional[Tensor] = None,
                       moving_seg: Optional[Tensor] = None,
                       target_seg: Optional[Tensor] = None,
                       dice_variant: str = CONVENTIONAL) -> SegmentationLoss:
    """
    Four-case segmentation loss. The field is used as a constant.

    *_pred are segmentation network outputs, *_seg manual one-hot maps.
    """
    field = field.detach()

    if labeling.both_unlabeled:
        zero = Tensor(0.0)
        return SegmentationLoss(zero, zero, zero)

    if not labeling.target_labeled:
        seg_m = _require(moving_seg, 'moving_seg')
        anatomy = soft_dice_loss(warp(seg_m, field), _require(target_pred, 'target_pred'),
                                 dice_variant)
        supervised = soft_dice_loss(_require(moving_pred, 'moving_pred'), seg_m, dice_variant)
    elif not labeling.moving_labeled:
        seg_t = _require(target_seg, 'target_seg')
        anatomy = soft_dice_loss(warp(_require(moving_pred, 'moving_pred'), field), seg_t,
                                 dice_variant)
        supervised = soft_dice_loss(_require(target_pred, 'target_pred'), seg_t, dice_variant)
    else:
        seg_m = _require(moving_seg, 'moving_seg')
        anatomy = soft_dice_loss(warp(seg_m, field), _require(target_seg, 'target_seg'),
                                 dice_variant)
        supervised = soft_dice_loss(_require(moving_pred, 'moving_pred'), seg_m, dice_variant)

    total = weights.lambda_a * anatomy + weights.lambda_sp * supervised
    return SegmentationLoss(anatomy, supervised, total)


def segmentation_objective(field: DisplacementField, labeling: PairLabeling,
                           weights: LossWeights,
                           moving_pred: Optional[Tensor] = None,
                           target_pred: Optional[Tensor] = None,
                           moving_seg: Optional[Tensor] = None,
                           target_seg: Optional[Tensor] = None,
                           dice_variant: str = CONVENTIONAL) -> Tensor:
    """Weighted semi-supervised segmentation loss"""
    return segmentation_terms(field, labeling, weights, moving_pred, target_pred,
                              moving_seg, target_seg, dice_variant).total
