# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.

"""Real actions performed by deepatlas script."""
from os.path import join
from typing import Dict, List, Optional, Sequence

import numpy as np
import click

from .checkpoint import CheckpointError, load_checkpoint, load_reg_checkpoint, \
    load_seg_checkpoint, save_checkpoint
from .data import ALL_LABELED, DataGenerationError, DatasetSplit, LabeledImage, \
    SyntheticDataset, SyntheticSpec, generate_dataset, load_dataset, load_split, save_dataset, \
    split
from .evaluation import EVAL_MODES, REG_MODE, ClassGroups, EvalReport, eval_registration, \
    eval_segmentation, ordered_pairs, predict_labels, write_report
from .global_config import EXIT_OK, EXIT_CONFIG_ERROR, EXIT_NUMERIC_FAILURE, EXIT_IO_ERROR, \
    SEG_CHECKPOINT_NAME, REG_CHECKPOINT_NAME, SUMMARY_NAME, IMAGES_DIR, get_reports_dir, \
    get_checkpoint_path, get_metric_log_path
from .gradcheck import GRAD_TOLERANCE, run_gradcheck
from .imageops import warp
from .log_utils import MetricLog, init_log, log_message, shutdown_log
from .nets import NetParams, RegNetParams, SegNetParams, describe, reg_forward, seg_forward
from .render import render_grid, render_slice
from .run_config import RunConfig, load_config
from .tensor import ShapeError, Tensor
from .trainer import ConfigError, NumericFailure, ProtocolResult, TrainConfig, run_protocol
from .utils import create_dir_if_not_exist, expand_path, load_npy, read_json, save_npy, \
    write_json

UNEXPECTED_ERROR = 1


def exit_code_for(error: BaseException) -> int:
    """Maps exception to process exit code"""
    if isinstance(error, (ConfigError, DataGenerationError, ShapeError)):
        return EXIT_CONFIG_ERROR

    if isinstance(error, (NumericFailure, ArithmeticError)):
        return EXIT_NUMERIC_FAILURE

    if isinstance(error, (OSError, CheckpointError)):
        return EXIT_IO_ERROR

    return UNEXPECTED_ERROR


def _label_counts(dataset: SyntheticDataset) -> List[int]:
    counts = np.zeros(dataset.spec.classes, dtype=np.int64)

    for image in dataset.images:
        if image.labels is not None:
            counts += np.bincount(image.labels.ravel(), minlength=dataset.spec.classes)

    return [int(c) for c in counts]


def do_gen_data(spec_path: str, out_dir: str, n_train: int, n_val: int, n_test: int) -> None:
    """Generates synthetic dataset and stores it with its default partition."""
    out_dir = expand_path(out_dir)
    create_dir_if_not_exist(out_dir)
    log_file = init_log(out_dir, 'gen-data')
    ret_code = EXIT_OK

    try:
        try:
            spec = SyntheticSpec.from_dict(read_json(expand_path(spec_path)))
        except (TypeError, ValueError) as error:
            raise ConfigError(f'Invalid dataset spec {spec_path}: {error}') from error

        dataset = generate_dataset(spec)
        partition: Optional[DatasetSplit] = None

        if n_train + n_val + n_test <= spec.count:
            partition = split(dataset, ALL_LABELED, 0, n_train, n_val, n_test)
        else:
            log_message(f'Partition {n_train}/{n_val}/{n_test} does not fit {spec.count} '
                        f'images, no split stored')

        save_dataset(out_dir, dataset, partition)
        click.echo(f'Generated {spec.count} images of shape {spec.spatial_shape} '
                   f'with {spec.classes} classes in {out_dir}')
        click.echo(f'Label voxel counts: {_label_counts(dataset)}')
        log_message(f'Dataset written to {out_dir}')
    except BaseException as error:
        ret_code = exit_code_for(error)
        raise
    finally:
        shutdown_log(ret_code, log_file)


def obtain_dataset(config: RunConfig) -> SyntheticDataset:
    """Loads dataset directory or generates in-memory dataset"""
    if config.data.path:
        return load_dataset(expand_path(config.data.path))

    return generate_dataset(config.data.synthetic_spec())


def _attach_checkpoints(config: RunConfig, train_config: TrainConfig) -> None:
    if config.train.seg_checkpoint:
        train_config.seg_init = load_seg_checkpoint(expand_path(config.train.seg_checkpoint))

    if config.train.reg_checkpoint:
        train_config.reg_init = load_reg_checkpoint(expand_path(config.train.reg_checkpoint))


def _check_model(config: RunConfig, dataset: SyntheticDataset) -> None:
    if dataset.spec.classes != config.model.classes or dataset.spec.dim != config.model.dim:
        raise ConfigError(f'Dataset has {dataset.spec.classes} classes and rank '
                          f'{dataset.spec.dim}, model expects {config.model.classes} and '
                          f'{config.model.dim}')

    factor = 2 ** config.model.depth

    if any(n % factor for n in dataset.spec.spatial_shape):
        raise ConfigError(f'Image shape {dataset.spec.spatial_shape} is not divisible by '
                          f'2^depth = {factor}')


def make_partition(config: RunConfig, dataset: SyntheticDataset) -> DatasetSplit:
    """Train/val/test partition with label masking from data section"""
    try:
        return split(dataset, config.data.n_labeled, config.data.split_seed,
                     config.data.n_train, config.data.n_val, config.data.n_test)
    except ValueError as error:
        raise ConfigError(str(error)) from error


def write_split_reports(result: ProtocolResult, partition: DatasetSplit, split_name: str,
                        out_dir: str, classes: int, groups: ClassGroups,
                        metadata: Dict[str, object]) -> List[EvalReport]:
    """Evaluates trained networks on a partition and writes their reports"""
    images = partition.partition(split_name)
    reports = []

    if result.seg is not None and images:
        report = eval_segmentation(result.seg, images, groups, metadata)
        write_report(report, get_reports_dir(out_dir, split_name, report.mode))
        reports.append(report)

    if result.reg is not None and len(images) > 1:
        report = eval_registration(result.reg, images, classes, groups, metadata)
        write_report(report, get_reports_dir(out_dir, split_name, report.mode))
        reports.append(report)

    return reports


def do_train(config_path: str) -> None:
    """Runs training protocol from config file."""
    config = load_config(expand_path(config_path))
    out_dir = expand_path(config.output.directory)
    create_dir_if_not_exist(out_dir)
    log_file = init_log(out_dir, f'train {config_path}')
    ret_code = EXIT_OK

    try:
        dataset = obtain_dataset(config)
        _check_model(config, dataset)
        partition = make_partition(config, dataset)
        train_config = config.train_config()
        _attach_checkpoints(config, train_config)

        click.secho(f'Training {train_config.protocol} with {len(partition.labeled_ids)} of '
                    f'{len(partition.train)} training images labeled', bold=True)

        with MetricLog(get_metric_log_path(out_dir), config.train.log_wall_time) as metric_log:
            result = run_protocol(train_config, partition, metric_log)

        if result.seg is not None:
            save_checkpoint(get_checkpoint_path(out_dir, SEG_CHECKPOINT_NAME), result.seg)

        if result.reg is not None:
            save_checkpoint(get_checkpoint_path(out_dir, REG_CHECKPOINT_NAME), result.reg)

        metadata = {'protocol': train_config.protocol, 'n_labeled': len(partition.labeled_ids),
                    'seed': train_config.seed, 'split': 'val'}
        reports = write_split_reports(result, partition, 'val', out_dir, config.model.classes,
                                      config.eval.class_groups, metadata)

        for report in reports:
            click.echo(report.summary())

        write_json(join(out_dir, SUMMARY_NAME),
                   dict(result.to_dict(), protocol=train_config.protocol,
                        split=partition.to_dict(),
                        networks={name: describe(params) for name, params in
                                  (('seg', result.seg), ('reg', result.reg))
                                  if params is not None}))
        log_message(f'Training finished, outputs in {out_dir}')
    except BaseException as error:
        ret_code = exit_code_for(error)
        raise
    finally:
        shutdown_log(ret_code, log_file)


def read_image(path: str, dim: int) -> Tensor:
    """Reads [spatial...], [1, spatial...] or [N, 1, spatial...] NPY image as a batch"""
    data = load_npy(expand_path(path)).astype(np.float64)

    while data.ndim < dim + 2:
        data = data[None]

    if data.ndim != dim + 2 or data.shape[1] != 1:
        raise ShapeError(f'Image {path} of shape {data.shape} is not a {dim}-D image')

    return Tensor(data)


def do_segment(checkpoint: str, image_path: str, out_path: str, hard: bool) -> None:
    """Writes class probabilities (or hard labels) of an image."""
    params = load_seg_checkpoint(expand_path(checkpoint))
    probs = seg_forward(params, read_image(image_path, params.dim)).data

    if hard:
        save_npy(expand_path(out_path), np.argmax(probs, axis=1).astype(np.int64))
    else:
        save_npy(expand_path(out_path), probs)

    click.echo(f'Segmentation of {image_path} written to {out_path}')


def do_register(checkpoint: str, moving_path: str, target_path: str, out_field: str,
                out_warped: Optional[str]) -> None:
    """Writes displacement field and optionally the warped moving image."""
    params = load_reg_checkpoint(expand_path(checkpoint))
    moving = read_image(moving_path, params.dim)
    target = read_image(target_path, params.dim)
    deformation = reg_forward(params, moving, target)
    save_npy(expand_path(out_field), deformation.u.data)

    if out_warped:
        save_npy(expand_path(out_warped), warp(moving, deformation).data)

    click.echo(f'Displacement field written to {out_field}')


def _eval_partition(data_dir: str, dataset: SyntheticDataset,
                    sizes: Sequence[int]) -> DatasetSplit:
    try:
        stored = load_split(data_dir, dataset)
        return stored if stored is not None else split(dataset, ALL_LABELED, 0, *sizes)
    except ValueError as error:
        raise ConfigError(str(error)) from error


def _render_examples(params: NetParams, images: Sequence[LabeledImage], out_dir: str,
                     classes: int) -> None:
    images_dir = join(out_dir, IMAGES_DIR)
    create_dir_if_not_exist(images_dir)

    if isinstance(params, SegNetParams):
        image = images[0]
        render_slice(image.intensity, join(images_dir, f'{image.id}_image.pgm'))
        render_slice(predict_labels(params, image), join(images_dir, f'{image.id}_pred.pgm'),
                     labels=True)

        if image.labels is not None:
            render_slice(image.labels, join(images_dir, f'{image.id}_labels.pgm'), labels=True)
    elif isinstance(params, RegNetParams):
        moving, target = ordered_pairs(images)[0]
        moving_t, target_t = Tensor(moving.intensity[None]), Tensor(target.intensity[None])
        deformation = reg_forward(params, moving_t, target_t)
        render_slice(moving.intensity, join(images_dir, 'moving.pgm'))
        render_slice(target.intensity, join(images_dir, 'target.pgm'))
        render_slice(warp(moving_t, deformation), join(images_dir, 'warped.pgm'))
        render_grid(deformation, join(images_dir, 'grid.pgm'))

    log_message(f'Example images of {classes} classes rendered to {images_dir}')


def do_eval(checkpoint: str, data_dir: str, split_name: str, mode: str, out_dir: str,
            groups: ClassGroups, sizes: Sequence[int]) -> None:
    """Evaluates checkpoint on a dataset partition and writes the report."""
    if mode not in EVAL_MODES:
        raise ConfigError(f'Unknown eval mode: {mode}')

    out_dir = expand_path(out_dir)
    create_dir_if_not_exist(out_dir)
    log_file = init_log(out_dir, f'eval {mode} {split_name}')
    ret_code = EXIT_OK

    try:
        data_dir = expand_path(data_dir)
        dataset = load_dataset(data_dir)
        images = _eval_partition(data_dir, dataset, sizes).partition(split_name)
        params = load_checkpoint(expand_path(checkpoint))
        metadata = {'checkpoint': checkpoint, 'split': split_name, 'data': data_dir}

        if mode == REG_MODE:
            if not isinstance(params, RegNetParams):
                raise CheckpointError(f'{checkpoint} is not a registration checkpoint')

            if len(images) < 2:
                raise ConfigError(f'Split {split_name} needs at least 2 images')

            report = eval_registration(params, images, dataset.spec.classes, groups, metadata)
        else:
            if not isinstance(params, SegNetParams):
                raise CheckpointError(f'{checkpoint} is not a segmentation checkpoint')

            if not images:
                raise ConfigError(f'Split {split_name} is empty')

            report = eval_segmentation(params, images, groups, metadata)

        write_report(report, out_dir)
        _render_examples(params, images, out_dir, dataset.spec.classes)
        click.echo(report.summary())
    except BaseException as error:
        ret_code = exit_code_for(error)
        raise
    finally:
        shutdown_log(ret_code, log_file)


def do_gradcheck(seed: int, names: Sequence[str]) -> bool:
    """Runs finite-difference suite, prints worst error per check."""
    try:
        results = run_gradcheck(seed, names)
    except ValueError as error:
        raise ConfigError(str(error)) from error

    for result in results:
        color = 'green' if result.passed else 'red'
        click.secho(f'{result.name:32s} {result.worst_error:.3e}', fg=color)

    passed = all(result.passed for result in results)
    click.secho(f'{"All" if passed else "Not all"} checks below {GRAD_TOLERANCE:g}',
                bold=True, fg='green' if passed else 'red')
    return passed

