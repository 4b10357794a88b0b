# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Segmentation and registration measurement.

Dice scores are hard-label overlaps in percent. Registration is measured on
every ordered pair of distinct images by warping the moving labels with
nearest interpolation.
"""
import csv
from dataclasses import dataclass, field
from itertools import permutations
from os.path import join
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import LabeledImage
from .global_config import LABEL_DTYPE, PER_IMAGE_CSV_NAME, REPORT_NAME
from .imageops import NEAREST, folding_fraction, warp
from .nets import RegNetParams, SegNetParams, reg_forward, seg_forward
from .tensor import Tensor
from .utils import create_dir_if_not_exist, parallel_map, write_json

SEG_MODE = 'seg'
REG_MODE = 'reg'
EVAL_MODES = (SEG_MODE, REG_MODE)
PAIR_SEPARATOR = '->'

ClassGroups = Dict[str, List[int]]


def hard_dice(pred_labels: np.ndarray, true_labels: np.ndarray, classes: int) -> np.ndarray:
    """Per-class Dice in percent; a class absent from both maps scores 100"""
    if pred_labels.shape != true_labels.shape:
        raise ValueError(f'Label maps have different shapes: {pred_labels.shape} '
                         f'and {true_labels.shape}')

    res = np.empty(classes)

    for k in range(classes):
        pred_k = pred_labels == k
        true_k = true_labels == k
        total = int(pred_k.sum() + true_k.sum())
        res[k] = 100.0 if total == 0 else 200.0 * np.logical_and(pred_k, true_k).sum() / total

    return res


def foreground_mean(scores: np.ndarray) -> float:
    """Mean Dice over classes 1..K-1"""
    return float(np.mean(scores[1:])) if len(scores) > 1 else float(scores[0])


@dataclass
class EvalReport:
    """Aggregated Dice scores of a partition"""
    mode: str
    classes: int
    per_image: Dict[str, List[float]]
    per_class: List[float]
    mean_dice: float
    std_dice: float
    groups: Dict[str, float] = field(default_factory=dict)
    folding_fraction: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        """JSON representation written to report.json"""
        return {'mode': self.mode, 'classes': self.classes, 'per_class': self.per_class,
                'mean_dice': self.mean_dice, 'std_dice': self.std_dice, 'groups': self.groups,
                'folding_fraction': self.folding_fraction, 'metadata': self.metadata,
                'count': len(self.per_image)}

    def summary(self) -> str:
        """One-line human-readable summary"""
        text = f'{self.mode}: Dice {self.mean_dice:.2f} ({self.std_dice:.2f}) over ' \
               f'{len(self.per_image)} {"pairs" if self.mode == REG_MODE else "images"}'

        if self.groups:
            text += ', ' + ', '.join(f'{name} {value:.2f}' for name, value in self.groups.items())

        if self.folding_fraction is not None:
            text += f', folding {100 * self.folding_fraction:.3f}%'

        return text


def summarize(mode: str, classes: int, scores: Dict[str, np.ndarray],
              groups: Optional[ClassGroups] = None, folding: Optional[float] = None,
              metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Builds report from per-image per-class scores"""
    if not scores:
        raise ValueError('Nothing to evaluate')

    matrix = np.stack(list(scores.values()))
    means = np.array([foreground_mean(row) for row in matrix])
    group_means = {}

    for name, members in (groups or {}).items():
        if any(not 0 <= k < classes for k in members):
            raise ValueError(f'Class group {name} refers to unknown classes: {members}')

        group_means[name] = float(np.mean(matrix[:, members]))

    return EvalReport(mode, classes, {key: [float(v) for v in row] for key, row in scores.items()},
                      [float(v) for v in matrix.mean(axis=0)], float(means.mean()),
                      float(means.std()), group_means, folding, dict(metadata or {}))


def _true_labels(image: LabeledImage) -> np.ndarray:
    if image.labels is None:
        raise ValueError(f'Image {image.id} has no labels to evaluate against')

    return image.labels


def predict_labels(params: SegNetParams, image: LabeledImage) -> np.ndarray:
    """Hard labels by argmax over class probabilities; ties go to the lowest class"""
    probs = seg_forward(params, Tensor(image.intensity[None])).data[0]
    return np.argmax(probs, axis=0).astype(LABEL_DTYPE)


def eval_segmentation(params: SegNetParams, images: Sequence[LabeledImage],
                      groups: Optional[ClassGroups] = None,
                      metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Dice of predicted against manual labels for every image"""
    def score(image: LabeledImage) -> np.ndarray:
        return hard_dice(predict_labels(params, image), _true_labels(image), params.classes)

    results = parallel_map(score, list(images))
    return summarize(SEG_MODE, params.classes,
                     {image.id: res for image, res in zip(images, results)}, groups,
                     metadata=metadata)


def ordered_pairs(images: Sequence[LabeledImage]) -> List[Tuple[LabeledImage, LabeledImage]]:
    """All ordered pairs of distinct images"""
    return list(permutations(images, 2))


def pair_id(moving: LabeledImage, target: LabeledImage) -> str:
    """Row key of a registration pair"""
    return f'{moving.id}{PAIR_SEPARATOR}{target.id}'


def register_labels(params: RegNetParams, moving: LabeledImage,
                    target: LabeledImage) -> Tuple[np.ndarray, float]:
    """Moving labels warped into target space and folding fraction of the field"""
    deformation = reg_forward(params, Tensor(moving.intensity[None]),
                              Tensor(target.intensity[None]))
    labels = _true_labels(moving).astype(float)[None, None]
    warped = warp(Tensor(labels), deformation, NEAREST).data[0, 0]
    return np.rint(warped).astype(LABEL_DTYPE), folding_fraction(deformation)


def eval_registration(params: RegNetParams, images: Sequence[LabeledImage], classes: int,
                      groups: Optional[ClassGroups] = None,
                      metadata: Optional[Dict[str, Any]] = None) -> EvalReport:
    """Dice of warped moving labels against target labels over all ordered pairs"""
    pairs = ordered_pairs(images)

    def score(pair: Tuple[LabeledImage, LabeledImage]) -> Tuple[np.ndarray, float]:
        warped, folding = register_labels(params, *pair)
        return hard_dice(warped, _true_labels(pair[1]), classes), folding

    results = parallel_map(score, pairs)
    folding = float(np.mean([res[1] for res in results])) if results else 0.0
    return summarize(REG_MODE, classes,
                     {pair_id(*pair): res[0] for pair, res in zip(pairs, results)}, groups,
                     folding, metadata)


def write_report(report: EvalReport, out_dir: str) -> None:
    """Writes report.json and per_image.csv"""
    create_dir_if_not_exist(out_dir)
    write_json(join(out_dir, REPORT_NAME), report.to_dict())

    with open(join(out_dir, PER_IMAGE_CSV_NAME), mode='w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file)
        writer.writerow(['id'] + [f'dice_{k}' for k in range(report.classes)] + ['mean_dice'])

        for key, row in report.per_image.items():
            writer.writerow([key] + [repr(v) for v in row] +
                            [repr(foreground_mean(np.array(row)))])


def read_per_image_csv(path: str) -> Dict[str, List[float]]:
    """Per-class scores keyed by image or pair id"""
    with open(path, mode='r', encoding='utf-8', newline='') as file:
        reader = csv.reader(file)
        next(reader)
        return {row[0]: [float(v) for v in row[1:-1]] for row in reader}
