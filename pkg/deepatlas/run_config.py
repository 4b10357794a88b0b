# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""Run configuration files: sections, defaults and validation"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

from .data import ALL_LABELED, SyntheticSpec
from .losses import DICE_VARIANTS, REGULARIZERS, CONVENTIONAL, BENDING, LossWeights
from .nets import DEF_DEPTH, DEF_WIDTH, DEF_CLASSES, DEF_DIM
from .trainer import (ConfigError, TrainConfig, PROTOCOLS, MONO_SEG, MONO_REG, DEF_MONO_LR,
                      DEF_JOINT_LR_REG, DEF_JOINT_LR_SEG)
from .utils import read_json

KNEE_PRESET = 'knee'
BRAIN_PRESET = 'brain'
LAMBDA_R_PRESETS = {KNEE_PRESET: 20000.0, BRAIN_PRESET: 5000.0}

REQUIRED = object()


class ConfigKey(NamedTuple):
    """Documented configuration key"""
    section: str
    key: str
    types: Tuple[type, ...]
    default: Any
    description: str
    provenance: str = ''


NUMBER = (int, float)
OPTIONAL_NUMBER = (int, float, type(None))

CONFIG_KEYS: List[ConfigKey] = [
    ConfigKey('data', 'synthetic', (dict, type(None)), None,
              'synthetic dataset spec, generated in memory when data.path is empty'),
    ConfigKey('data', 'path', (str,), '', 'dataset directory written by gen-data'),
    ConfigKey('data', 'n_labeled', (int,), 2,
              f'labeled training images, {ALL_LABELED} labels all of them',
              'N of M training images are manually labeled'),
    ConfigKey('data', 'n_train', (int,), 40, 'training images, taken first in index order'),
    ConfigKey('data', 'n_val', (int,), 8, 'validation images'),
    ConfigKey('data', 'n_test', (int,), 12, 'test images'),
    ConfigKey('data', 'split_seed', (int,), 0, 'seed choosing the labeled training images'),
    ConfigKey('model', 'depth', (int,), DEF_DEPTH, 'encoder levels L'),
    ConfigKey('model', 'width', (int,), DEF_WIDTH, 'base channel width W'),
    ConfigKey('model', 'classes', (int,), DEF_CLASSES, 'segmentation classes K'),
    ConfigKey('model', 'dim', (int,), DEF_DIM, 'spatial rank d'),
    ConfigKey('loss', 'preset', (str,), KNEE_PRESET,
              'knee sets lambda_r=20000, brain sets lambda_r=5000',
              'brain registration needs large deformations, hence less regularization'),
    ConfigKey('loss', 'lambda_r', OPTIONAL_NUMBER, None, 'regularity weight, preset if null',
              'lambda_r=20,000 for knee MRI'),
    ConfigKey('loss', 'lambda_a', NUMBER, 3.0, 'anatomy similarity weight', 'lambda_a=3'),
    ConfigKey('loss', 'lambda_sp', NUMBER, 3.0, 'supervised segmentation weight',
              'lambda_sp=3'),
    ConfigKey('loss', 'dice_variant', (str,), CONVENTIONAL,
              f'soft Dice form, one of {", ".join(DICE_VARIANTS)}'),
    ConfigKey('loss', 'regularizer', (str,), BENDING,
              f'displacement regularizer, one of {", ".join(REGULARIZERS)}',
              'bending energy'),
    ConfigKey('train', 'protocol', (str,), REQUIRED, f'one of {", ".join(PROTOCOLS)}',
              'Mono, Semi-DA and DA training'),
    ConfigKey('train', 'epochs', (int,), 10, 'epochs per training stage'),
    ConfigKey('train', 'batch_size', (int,), 1, 'pairs (or images) per step'),
    ConfigKey('train', 'lr_seg', OPTIONAL_NUMBER, None,
              f'segmentation learning rate, {DEF_MONO_LR} mono / {DEF_JOINT_LR_SEG} joint if null',
              'initial rates 1e-3 mono, 1e-4 segmentation in Semi-DA and DA'),
    ConfigKey('train', 'lr_reg', OPTIONAL_NUMBER, None,
              f'registration learning rate, {DEF_MONO_LR} mono / {DEF_JOINT_LR_REG} joint if null',
              'initial rates 1e-3 mono, 5e-4 registration in Semi-DA and DA'),
    ConfigKey('train', 'lr_decay', NUMBER, 0.2, 'factor applied at every decay epoch',
              'learning rates decay by 0.2'),
    ConfigKey('train', 'decay_epochs', (list,), [], 'epochs at which rates decay'),
    ConfigKey('train', 'alt_ratio', (int,), 20, 'registration steps per segmentation step',
              '1:20 ratio between segmentation and registration steps'),
    ConfigKey('train', 'seed', (int,), 0, 'network init and pair sampling seed'),
    ConfigKey('train', 'patience', (int,), 5,
              'one-shot ladder: validations without improvement before alternation starts'),
    ConfigKey('train', 'seg_checkpoint', (str,), '', 'pretrained segmentation checkpoint'),
    ConfigKey('train', 'reg_checkpoint', (str,), '', 'pretrained registration checkpoint'),
    ConfigKey('train', 'pairs_per_epoch', (int, type(None)), None,
              'steps per epoch, number of training images if null'),
    ConfigKey('train', 'log_wall_time', (bool,), False, 'add wall_time to metric records'),
    ConfigKey('eval', 'class_groups', (dict,), {},
              'named class groups averaged in reports, e.g. {"cartilages": [2, 4]}',
              'grouped Bones / Cartilages means'),
    ConfigKey('output', 'directory', (str,), REQUIRED, 'run output directory'),
]

SECTIONS = ('data', 'model', 'loss', 'train', 'eval', 'output')


@dataclass
class DataSection:
    """Dataset source and partition"""
    synthetic: Optional[Dict[str, Any]] = None
    path: str = ''
    n_labeled: int = 2
    n_train: int = 40
    n_val: int = 8
    n_test: int = 12
    split_seed: int = 0

    def synthetic_spec(self) -> SyntheticSpec:
        """Spec of in-memory dataset"""
        try:
            return SyntheticSpec.from_dict(self.synthetic or {})
        except (TypeError, ValueError) as error:
            raise ConfigError(f'Invalid data.synthetic: {error}') from error


@dataclass
class ModelSection:
    """Network hyperparameters"""
    depth: int = DEF_DEPTH
    width: int = DEF_WIDTH
    classes: int = DEF_CLASSES
    dim: int = DEF_DIM


@dataclass
class LossSection:
    """Loss weights and variants"""
    preset: str = KNEE_PRESET
    lambda_r: Optional[float] = None
    lambda_a: float = 3.0
    lambda_sp: float = 3.0
    dice_variant: str = CONVENTIONAL
    regularizer: str = BENDING

    def weights(self) -> LossWeights:
        """Resolved loss weights"""
        lambda_r = self.lambda_r if self.lambda_r is not None else LAMBDA_R_PRESETS[self.preset]
        return LossWeights(float(lambda_r), float(self.lambda_a), float(self.lambda_sp))


@dataclass
class TrainSection:
    # pylint: disable=too-many-instance-attributes
    """Protocol and optimization settings"""
    protocol: str = MONO_SEG
    epochs: int = 10
    batch_size: int = 1
    lr_seg: Optional[float] = None
    lr_reg: Optional[float] = None
    lr_decay: float = 0.2
    decay_epochs: List[int] = field(default_factory=list)
    alt_ratio: int = 20
    seed: int = 0
    patience: int = 5
    seg_checkpoint: str = ''
    reg_checkpoint: str = ''
    pairs_per_epoch: Optional[int] = None
    log_wall_time: bool = False

    def learning_rates(self) -> Tuple[float, float]:
        """(lr_seg, lr_reg) with protocol-dependent defaults"""
        mono = self.protocol in (MONO_SEG, MONO_REG)
        lr_seg = self.lr_seg if self.lr_seg is not None else \
            (DEF_MONO_LR if mono else DEF_JOINT_LR_SEG)
        lr_reg = self.lr_reg if self.lr_reg is not None else \
            (DEF_MONO_LR if mono else DEF_JOINT_LR_REG)
        return float(lr_seg), float(lr_reg)


@dataclass
class EvalSection:
    """Report settings"""
    class_groups: Dict[str, List[int]] = field(default_factory=dict)


@dataclass
class OutputSection:
    """Output location"""
    directory: str = ''


@dataclass
class RunConfig:
    """Complete run configuration"""
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    def train_config(self) -> TrainConfig:
        """Trainer settings; checkpoints are attached by the caller"""
        lr_seg, lr_reg = self.train.learning_rates()
        return TrainConfig(protocol=self.train.protocol, weights=self.loss.weights(),
                           epochs=self.train.epochs, batch_size=self.train.batch_size,
                           lr_seg=lr_seg, lr_reg=lr_reg, lr_decay=float(self.train.lr_decay),
                           decay_epochs=list(self.train.decay_epochs),
                           alt_ratio=self.train.alt_ratio, seed=self.train.seed,
                           patience=self.train.patience, dice_variant=self.loss.dice_variant,
                           regularizer=self.loss.regularizer,
                           pairs_per_epoch=self.train.pairs_per_epoch, depth=self.model.depth,
                           width=self.model.width, classes=self.model.classes)


SECTION_CLASSES = {'data': DataSection, 'model': ModelSection, 'loss': LossSection,
                   'train': TrainSection, 'eval': EvalSection, 'output': OutputSection}


def _check_type(key: ConfigKey, value: Any) -> None:
    # bool is an int subclass, reject it where a number is expected
    if isinstance(value, bool) and bool not in key.types:
        raise ConfigError(f'{key.section}.{key.key} must not be boolean')

    if not isinstance(value, key.types):
        names = ', '.join('null' if t is type(None) else t.__name__ for t in key.types)
        raise ConfigError(f'{key.section}.{key.key} must be of type {names}, '
                          f'got {type(value).__name__}')


def parse_config(document: Any) -> RunConfig:
    """Builds RunConfig from parsed JSON document"""
    if not isinstance(document, dict):
        raise ConfigError('Run config must be a JSON object')

    unknown_sections = sorted(set(document) - set(SECTIONS))

    if unknown_sections:
        raise ConfigError(f'Unknown config sections: {", ".join(unknown_sections)}')

    values: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}

    for name in SECTIONS:
        section = document.get(name, {})

        if not isinstance(section, dict):
            raise ConfigError(f'Section {name} must be a JSON object')

        known = {key.key for key in CONFIG_KEYS if key.section == name}
        unknown = sorted(set(section) - known)

        if unknown:
            raise ConfigError(f'Unknown keys in section {name}: {", ".join(unknown)}')

    for key in CONFIG_KEYS:
        section = document.get(key.section, {})

        if key.key not in section:
            if key.default is REQUIRED:
                raise ConfigError(f'Missing required key {key.section}.{key.key}')

            continue

        _check_type(key, section[key.key])
        values[key.section][key.key] = section[key.key]

    config = RunConfig(**{name: SECTION_CLASSES[name](**values[name])  # type: ignore
                          for name in SECTIONS})
    validate_config(config)
    return config


def validate_config(config: RunConfig) -> None:
    """Checks value ranges and cross-section consistency"""
    if config.train.protocol not in PROTOCOLS:
        raise ConfigError(f'Unknown protocol: {config.train.protocol}')

    if config.loss.preset not in LAMBDA_R_PRESETS:
        raise ConfigError(f'Unknown loss preset: {config.loss.preset}')

    if config.loss.dice_variant not in DICE_VARIANTS:
        raise ConfigError(f'Unknown Dice variant: {config.loss.dice_variant}')

    if config.loss.regularizer not in REGULARIZERS:
        raise ConfigError(f'Unknown regularizer: {config.loss.regularizer}')

    if not config.output.directory:
        raise ConfigError('output.directory must not be empty')

    if config.data.path and config.data.synthetic is not None:
        raise ConfigError('data.path and data.synthetic are mutually exclusive')

    if not all(isinstance(epoch, int) for epoch in config.train.decay_epochs):
        raise ConfigError('train.decay_epochs must list integers')

    for name, members in config.eval.class_groups.items():
        if not isinstance(members, list) or \
                not all(isinstance(k, int) and 0 <= k < config.model.classes for k in members):
            raise ConfigError(f'Class group {name} must list classes in [0, '
                              f'{config.model.classes})')

    if config.data.n_labeled < ALL_LABELED or config.data.n_labeled > config.data.n_train:
        raise ConfigError(f'data.n_labeled must be in [{ALL_LABELED}, {config.data.n_train}]')

    if config.data.synthetic is not None:
        spec = config.data.synthetic_spec()

        if spec.classes != config.model.classes or spec.dim != config.model.dim:
            raise ConfigError('data.synthetic classes/rank differ from model.classes/dim')

    try:
        config.loss.weights()
        config.train_config()
    except ValueError as error:
        raise ConfigError(str(error)) from error


def load_config(path: str) -> RunConfig:
    """Reads and validates run config file"""
    try:
        document = read_json(path)
    except ValueError as error:
        raise ConfigError(f'Cannot parse run config {path}: {error}') from error

    return parse_config(document)


def describe_keys() -> str:
    """Text table of every config key with default and provenance"""
    lines = ['Run config keys (section.key = default: description [provenance]):', '']

    for key in CONFIG_KEYS:
        default = 'required' if key.default is REQUIRED else repr(key.default)
        line = f'  {key.section}.{key.key} = {default}: {key.description}'

        if key.provenance:
            line += f' [{key.provenance}]'

        lines.append(line)

    return '\n'.join(lines)
