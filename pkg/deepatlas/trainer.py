# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Training protocols.

mono_seg and mono_reg train one network alone. semi_da_seg and semi_da_reg
train one network against a frozen partner. da alternates both networks,
alt_ratio registration steps for every segmentation step. With a single
labeled image da runs the automated one-shot ladder.
"""
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, cast

import numpy as np

from .data import DatasetSplit, LabeledImage, as_batch, one_hot
from .evaluation import eval_registration, eval_segmentation
from .imageops import DisplacementField, warp
from .log_utils import MetricLog, log_message
from .losses import (CONVENTIONAL, BENDING, LossWeights, PairLabeling, RegistrationLoss,
                     SegmentationLoss, registration_terms, segmentation_terms, soft_dice_loss)
from .nets import (DEF_DEPTH, DEF_WIDTH, NetParams, RegNetParams, SegNetParams, init_reg_net,
                   init_seg_net, reg_forward, seg_forward)
from .optim import Adam, decayed_lr
from .tensor import GradientTape, Tensor, concat, no_record

MONO_SEG = 'mono_seg'
MONO_REG = 'mono_reg'
SEMI_DA_SEG = 'semi_da_seg'
SEMI_DA_REG = 'semi_da_reg'
DA = 'da'
PROTOCOLS = (MONO_SEG, MONO_REG, SEMI_DA_SEG, SEMI_DA_REG, DA)

SEG_PHASE = 'seg'
REG_PHASE = 'reg'
VAL_PHASE = 'val'
LOSS_FIELDS = ('L_i', 'L_r', 'L_a', 'L_sp', 'total')

DEF_MONO_LR = 1e-3
DEF_JOINT_LR_SEG = 1e-4
DEF_JOINT_LR_REG = 5e-4


class ConfigError(ValueError):
    """Inconsistent training configuration"""


class NumericFailure(ArithmeticError):
    """Loss became NaN or infinite"""


@dataclass
class TrainConfig:
    """Everything a protocol run depends on"""
    protocol: str
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 10
    batch_size: int = 1
    lr_seg: float = DEF_MONO_LR
    lr_reg: float = DEF_MONO_LR
    lr_decay: float = 0.2
    decay_epochs: List[int] = field(default_factory=list)
    alt_ratio: int = 20
    seed: int = 0
    patience: int = 5
    dice_variant: str = CONVENTIONAL
    regularizer: str = BENDING
    pairs_per_epoch: Optional[int] = None
    depth: int = DEF_DEPTH
    width: int = DEF_WIDTH
    classes: int = 4
    seg_init: Optional[SegNetParams] = None
    reg_init: Optional[RegNetParams] = None

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f'Unknown protocol: {self.protocol}, expected one of {PROTOCOLS}')

        if self.alt_ratio < 1:
            raise ConfigError(f'alt_ratio must be at least 1, got {self.alt_ratio}')

        if self.lr_seg <= 0 or self.lr_reg <= 0:
            raise ConfigError('Learning rates must be positive')

        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f'lr_decay must be in (0, 1], got {self.lr_decay}')

        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError('epochs, batch_size and patience must be positive')


@dataclass
class PairSample:
    """Ordered pair of distinct images"""
    moving: LabeledImage
    target: LabeledImage

    @property
    def labeling(self) -> PairLabeling:
        """Manual label availability"""
        return PairLabeling(self.moving.is_labeled, self.target.is_labeled)


@dataclass
class ProtocolResult:
    """Trained networks, their best validation scores and the run history"""
    seg: Optional[SegNetParams]
    reg: Optional[RegNetParams]
    best_scores: Dict[str, float] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)
    stages: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """JSON summary"""
        return {'best_scores': self.best_scores, 'stages': self.stages,
                'steps': sum(1 for record in self.history if record['phase'] != VAL_PHASE)}


def sample_pair(images: Sequence[LabeledImage], rng: np.random.Generator,
                for_segmentation: bool) -> PairSample:
    """Uniform ordered pair of distinct images; segmentation steps reject unlabeled pairs"""
    count = len(images)

    if count < 2:
        raise ValueError(f'Pair sampling needs at least 2 images, got {count}')

    if for_segmentation and not any(image.is_labeled for image in images):
        raise ValueError('Segmentation pairs need at least one labeled image')

    while True:
        moving = int(rng.integers(count))
        target = int(rng.integers(count - 1))
        target += target >= moving
        pair = PairSample(images[moving], images[target])

        if not (for_segmentation and pair.labeling.both_unlabeled):
            return pair


def is_segmentation_step(step: int, alt_ratio: int) -> bool:
    """Step s is a segmentation step iff (s + 1) mod (alt_ratio + 1) == 0"""
    return (step + 1) % (alt_ratio + 1) == 0


def _check_finite(report: Dict[str, float]) -> None:
    for name, value in report.items():
        if not math.isfinite(value):
            raise NumericFailure(f'Loss component {name} is {value}')


def _image(image: LabeledImage) -> Tensor:
    return Tensor(image.intensity[None])


def _seg_map(image: LabeledImage, classes: int,
             seg: Optional[SegNetParams]) -> Optional[np.ndarray]:
    """Manual one-hot labels, or the frozen network's estimate as a constant"""
    if image.labels is not None:
        return one_hot(image.labels, classes)

    if seg is None:
        return None

    with no_record():
        return seg_forward(seg, _image(image)).data


def registration_loss(reg: RegNetParams, seg: Optional[SegNetParams],
                      pairs: Sequence[PairSample], config: TrainConfig) -> RegistrationLoss:
    """
    Batched registration objective. Without a segmentation network the anatomy
    term covers only pairs with both manual segmentations.
    """
    moving = as_batch([pair.moving for pair in pairs])
    target = as_batch([pair.target for pair in pairs])
    deformation = reg_forward(reg, moving, target)
    maps = [(_seg_map(pair.moving, config.classes, seg),
             _seg_map(pair.target, config.classes, seg)) for pair in pairs]
    known = [(i, seg_m, seg_t) for i, (seg_m, seg_t) in enumerate(maps)
             if seg_m is not None and seg_t is not None]

    if not known:
        return registration_terms(moving, target, deformation, config.weights,
                                  dice_variant=config.dice_variant,
                                  regularizer=config.regularizer)

    seg_moving = Tensor(np.concatenate([seg_m for _, seg_m, _ in known]))
    seg_target = Tensor(np.concatenate([seg_t for _, _, seg_t in known]))

    if len(known) == len(pairs):
        return registration_terms(moving, target, deformation, config.weights,
                                  seg_moving, seg_target, config.dice_variant,
                                  config.regularizer)

    terms = registration_terms(moving, target, deformation, config.weights,
                               dice_variant=config.dice_variant,
                               regularizer=config.regularizer)
    subset = DisplacementField(concat([deformation.u[i:i + 1] for i, _, _ in known], axis=0))
    anatomy = soft_dice_loss(warp(seg_moving, subset), seg_target, config.dice_variant)
    return RegistrationLoss(terms.similarity, terms.regularity, anatomy,
                            terms.total + config.weights.lambda_a * anatomy)


def segmentation_loss(seg: SegNetParams, reg: RegNetParams, pair: PairSample,
                      config: TrainConfig) -> SegmentationLoss:
    """Four-case objective of one pair; the field is computed outside of any tape"""
    with no_record():
        deformation = reg_forward(reg, _image(pair.moving), _image(pair.target)).detach()

    def manual(image: LabeledImage) -> Optional[Tensor]:
        return Tensor(one_hot(image.labels, config.classes)) if image.labels is not None \
            else None

    return segmentation_terms(deformation, pair.labeling, config.weights,
                              seg_forward(seg, _image(pair.moving)),
                              seg_forward(seg, _image(pair.target)),
                              manual(pair.moving), manual(pair.target), config.dice_variant)


def train_registration_step(reg: RegNetParams, seg: Optional[SegNetParams],
                            pairs: Sequence[PairSample], config: TrainConfig,
                            optimizer: Adam) -> Dict[str, float]:
    """One Adam update of the registration network"""
    with GradientTape() as tape:
        terms = registration_loss(reg, seg, pairs, config)
        tape.backward(terms.total)

    report = terms.report()
    _check_finite(report)
    optimizer.step()
    return report


def train_segmentation_step(seg: SegNetParams, reg: RegNetParams,
                            pairs: Sequence[PairSample], config: TrainConfig,
                            optimizer: Adam) -> Dict[str, float]:
    """One Adam update of the segmentation network with the batch-averaged objective"""
    with GradientTape() as tape:
        terms = [segmentation_loss(seg, reg, pair, config) for pair in pairs]
        total = terms[0].total

        for item in terms[1:]:
            total = total + item.total

        total = total / len(terms)
        tape.backward(total)

    report = {'L_a': float(np.mean([t.anatomy.item() for t in terms])),
              'L_sp': float(np.mean([t.supervised.item() for t in terms])),
              'total': total.item()}
    _check_finite(report)
    optimizer.step()
    return report


def supervised_loss(seg: SegNetParams, images: Sequence[LabeledImage],
                    config: TrainConfig) -> Tensor:
    """Soft Dice of predictions against manual labels"""
    truth = Tensor(np.concatenate([one_hot(image.labels, config.classes) for image in images
                                   if image.labels is not None]))
    return soft_dice_loss(seg_forward(seg, as_batch(images)), truth, config.dice_variant)


def train_supervised_step(seg: SegNetParams, images: Sequence[LabeledImage],
                          config: TrainConfig, optimizer: Adam) -> Dict[str, float]:
    """One Adam update of the segmentation network on labeled images only"""
    with GradientTape() as tape:
        supervised = supervised_loss(seg, images, config)
        loss = config.weights.lambda_sp * supervised
        tape.backward(loss)

    report = {'L_sp': supervised.item(), 'total': loss.item()}
    _check_finite(report)
    optimizer.step()
    return report


class _Tracker:
    """Best validation score and a snapshot of the network that reached it"""

    def __init__(self) -> None:
        self.best = -math.inf
        self.snapshot: Optional[NetParams] = None
        self.since_best = 0

    def update(self, score: float, params: NetParams) -> None:
        """Records validation score"""
        if score > self.best:
            self.best = score
            self.snapshot = params.copy()
            self.since_best = 0
        else:
            self.since_best += 1


class _Run:
    """State shared by the stages of one protocol run"""

    def __init__(self, config: TrainConfig, data: DatasetSplit,
                 metric_log: Optional[MetricLog]) -> None:
        self.config = config
        self.data = data
        self.train = data.training_images()
        self.metric_log = metric_log
        self.rng = np.random.default_rng(config.seed)
        self.history: List[Dict[str, Any]] = []
        self.step = 0
        self.stages: List[str] = []

    @property
    def steps_per_epoch(self) -> int:
        """Pair steps in one epoch"""
        return self.config.pairs_per_epoch or len(self.train)

    def record(self, record: Dict[str, Any]) -> None:
        """Appends record to history and metric log"""
        self.history.append(record)

        if self.metric_log is not None:
            self.metric_log.write(record)

    def pairs(self, for_segmentation: bool) -> List[PairSample]:
        """Batch of sampled training pairs"""
        return [sample_pair(self.train, self.rng, for_segmentation)
                for _ in range(self.config.batch_size)]

    def labeled_batch(self) -> List[LabeledImage]:
        """Batch of labeled training images drawn with replacement"""
        labeled = [image for image in self.train if image.is_labeled]
        return [labeled[int(i)] for i in self.rng.integers(len(labeled),
                                                            size=self.config.batch_size)]

    def validate(self, stage: str, epoch: int, seg: Optional[SegNetParams],
                 reg: Optional[RegNetParams]) -> Dict[str, float]:
        """Mean validation Dice of the given networks"""
        scores: Dict[str, float] = {}

        if not self.data.val:
            return scores

        if seg is not None:
            scores['seg_dice'] = eval_segmentation(seg, self.data.val).mean_dice

        if reg is not None and len(self.data.val) > 1:
            scores['reg_dice'] = eval_registration(reg, self.data.val,
                                                   self.config.classes).mean_dice

        self.record(dict(scores, phase=VAL_PHASE, stage=stage, epoch=epoch))
        log_message(f'{stage} epoch {epoch}: ' +
                    ', '.join(f'{name} {value:.3f}' for name, value in scores.items()))
        return scores


def _optimizer(params: NetParams, lr: float) -> Adam:
    return Adam(params, lr)


def _train_stage(run: _Run, stage: str, seg: Optional[SegNetParams],
                 reg: Optional[RegNetParams], train_seg: bool, train_reg: bool,
                 lr_seg: float, lr_reg: float,
                 plateau_stop: bool = False) -> Tuple[Optional[SegNetParams],
                                                      Optional[RegNetParams], Dict[str, float]]:
    """Runs one training stage and returns the best validated networks"""
    config = run.config
    seg_opt = _optimizer(seg, lr_seg) if train_seg and seg is not None else None
    reg_opt = _optimizer(reg, lr_reg) if train_reg and reg is not None else None
    seg_best, reg_best = _Tracker(), _Tracker()
    run.stages.append(stage)
    log_message(f'Stage {stage} started')

    for epoch in range(config.epochs):
        if seg_opt is not None:
            seg_opt.lr = decayed_lr(lr_seg, config.lr_decay, config.decay_epochs, epoch)

        if reg_opt is not None:
            reg_opt.lr = decayed_lr(lr_reg, config.lr_decay, config.decay_epochs, epoch)

        for _ in range(run.steps_per_epoch):
            if seg_opt is not None and reg_opt is not None:
                phase = SEG_PHASE if is_segmentation_step(run.step, config.alt_ratio) \
                    else REG_PHASE
            else:
                phase = SEG_PHASE if seg_opt is not None else REG_PHASE

            if phase == SEG_PHASE:
                assert seg is not None and seg_opt is not None

                if reg is None:
                    report = train_supervised_step(seg, run.labeled_batch(), config, seg_opt)
                else:
                    report = train_segmentation_step(seg, reg, run.pairs(True), config, seg_opt)

                lr = seg_opt.lr
            else:
                assert reg is not None and reg_opt is not None
                report = train_registration_step(reg, seg, run.pairs(False), config, reg_opt)
                lr = reg_opt.lr

            terms = {name: report.get(name, 0.0) for name in LOSS_FIELDS}
            run.record(dict(terms, phase=phase, stage=stage, step=run.step, epoch=epoch, lr=lr))
            run.step += 1

        scores = run.validate(stage, epoch, seg if train_seg else None,
                              reg if train_reg else None)

        if train_seg and seg is not None:
            seg_best.update(scores.get('seg_dice', float(epoch)), seg)

        if train_reg and reg is not None:
            reg_best.update(scores.get('reg_dice', float(epoch)), reg)

        if plateau_stop and seg_best.since_best >= config.patience:
            log_message(f'Stage {stage}: validation Dice plateaued after epoch {epoch}')
            break

    best: Dict[str, float] = {}

    if seg_best.snapshot is not None:
        seg = cast(SegNetParams, seg_best.snapshot)
        best['seg_dice'] = seg_best.best

    if reg_best.snapshot is not None:
        reg = cast(RegNetParams, reg_best.snapshot)
        best['reg_dice'] = reg_best.best

    return seg, reg, best


def _fresh_seg(config: TrainConfig, dim: int) -> SegNetParams:
    return init_seg_net(config.depth, config.width, config.classes, dim, config.seed)


def _fresh_reg(config: TrainConfig, dim: int) -> RegNetParams:
    return init_reg_net(config.depth, config.width, dim, config.seed)


def _trainable(params: Optional[NetParams]) -> Any:
    return params.copy() if params is not None else None


def run_protocol(config: TrainConfig, data: DatasetSplit,
                 metric_log: Optional[MetricLog] = None) -> ProtocolResult:
    """Trains networks according to config.protocol"""
    if len(data.train) < 2:
        raise ConfigError('Training needs at least 2 images')

    n_labeled = len(data.labeled_ids)
    dim = data.train[0].intensity.ndim - 1
    run = _Run(config, data, metric_log)
    seg_init: Optional[SegNetParams] = _trainable(config.seg_init)
    reg_init: Optional[RegNetParams] = _trainable(config.reg_init)
    protocol = config.protocol
    log_message(f'Protocol {protocol} with {n_labeled} of {len(data.train)} training images '
                f'labeled')

    if protocol in (MONO_SEG, SEMI_DA_SEG) and n_labeled == 0:
        raise ConfigError(f'{protocol} needs at least one labeled training image')

    if protocol == MONO_SEG:
        seg, _, best = _train_stage(run, MONO_SEG, seg_init or _fresh_seg(config, dim), None,
                                    True, False, config.lr_seg, config.lr_reg)
        return ProtocolResult(seg, None, best, run.history, run.stages)

    if protocol == MONO_REG:
        _, reg, best = _train_stage(run, MONO_REG, None, reg_init or _fresh_reg(config, dim),
                                    False, True, config.lr_seg, config.lr_reg)
        return ProtocolResult(None, reg, best, run.history, run.stages)

    if protocol == SEMI_DA_SEG:
        if reg_init is None:
            raise ConfigError('semi_da_seg needs a pretrained registration checkpoint')

        seg, _, best = _train_stage(run, SEMI_DA_SEG, seg_init or _fresh_seg(config, dim),
                                    reg_init, True, False, config.lr_seg, config.lr_reg)
        return ProtocolResult(seg, reg_init, best, run.history, run.stages)

    if protocol == SEMI_DA_REG:
        if seg_init is None:
            raise ConfigError('semi_da_reg needs a pretrained segmentation checkpoint')

        _, reg, best = _train_stage(run, SEMI_DA_REG, seg_init,
                                    reg_init or _fresh_reg(config, dim), False, True,
                                    config.lr_seg, config.lr_reg)
        return ProtocolResult(seg_init, reg, best, run.history, run.stages)

    if n_labeled == 0:
        raise ConfigError('da needs at least one labeled training image')

    if n_labeled == 1 and seg_init is None:
        return _one_shot_ladder(run, reg_init, dim)

    if seg_init is None or reg_init is None:
        raise ConfigError('da needs pretrained segmentation and registration checkpoints')

    seg, reg, best = _train_stage(run, DA, seg_init, reg_init, True, True,
                                  config.lr_seg, config.lr_reg)
    return ProtocolResult(seg, reg, best, run.history, run.stages)


def _one_shot_ladder(run: _Run, reg_init: Optional[RegNetParams], dim: int) -> ProtocolResult:
    """Unsupervised registration, then Semi-DA segmentation from scratch, then DA"""
    config = run.config

    if reg_init is None:
        _, reg_init, _ = _train_stage(run, MONO_REG, None, _fresh_reg(config, dim), False, True,
                                      config.lr_seg, DEF_MONO_LR)

    assert reg_init is not None
    seg, _, _ = _train_stage(run, SEMI_DA_SEG, _fresh_seg(config, dim), reg_init, True, False,
                             config.lr_seg, config.lr_reg, plateau_stop=True)
    seg, reg, best = _train_stage(run, DA, seg, reg_init, True, True,
                                  config.lr_seg, config.lr_reg)
    return ProtocolResult(seg, reg, best, run.history, run.stages)
