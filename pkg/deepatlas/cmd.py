# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""Command line interface to deepatlas"""
import sys
from typing import Any, Callable, Dict, List, Optional, Tuple

import click

from .actions import do_gen_data, do_train, do_segment, do_register, do_eval, do_gradcheck, \
    exit_code_for
from .evaluation import EVAL_MODES, SEG_MODE
from .data import SPLIT_NAMES, TEST
from .global_config import EXIT_OK, EXIT_CONFIG_ERROR, EXIT_NUMERIC_FAILURE, EXIT_IO_ERROR
from .run_config import describe_keys

ERROR_TITLES = {
    EXIT_CONFIG_ERROR: 'Configuration error',
    EXIT_NUMERIC_FAILURE: 'Numeric failure',
    EXIT_IO_ERROR: 'I/O error',
}


def run_action(action: Callable[..., Any], *args: Any) -> Any:
    """Runs action, reports handled errors and exits with the mapped code"""
    try:
        return action(*args)
    except Exception as error:  # pylint: disable=broad-except
        ret_code = exit_code_for(error)

        if ret_code not in ERROR_TITLES:
            raise

        click.secho(f'{ERROR_TITLES[ret_code]}: {error}', fg='red', err=True)
        sys.exit(ret_code)


def parse_class_groups(values: Tuple[str, ...]) -> Dict[str, List[int]]:
    """Parses name=1,2,3 options"""
    groups: Dict[str, List[int]] = {}

    for value in values:
        name, sep, members = value.partition('=')

        if not sep or not name:
            raise click.BadParameter(f'Expected name=k1,k2,..., got {value}')

        try:
            groups[name] = [int(k) for k in members.split(',') if k]
        except ValueError as error:
            raise click.BadParameter(f'Invalid class list in {value}') from error

    return groups


@click.group()
@click.version_option()
def deepatlas() -> None:
    """
    Joint training of segmentation and registration networks on synthetic atlases.
    """


@click.command(short_help='Generate synthetic dataset')
@click.option('--spec', 'spec_path', type=click.Path(), required=True,
              help='JSON file with dataset spec')
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Dataset directory')
@click.option('--n-train', type=click.INT, default=40, show_default=True,
              help='Training images stored in the default partition')
@click.option('--n-val', type=click.INT, default=8, show_default=True,
              help='Validation images')
@click.option('--n-test', type=click.INT, default=12, show_default=True,
              help='Test images')
def gen_data(spec_path: str, out_dir: str, n_train: int, n_val: int, n_test: int) -> None:
    """deepatlas gen-data --spec file --out dir

    Writes manifest.json and one NPY file per intensity, label map and field.
    """
    run_action(do_gen_data, spec_path, out_dir, n_train, n_val, n_test)


@click.command(short_help='Train networks', epilog=describe_keys())
@click.option('--config', 'config_path', type=click.Path(), required=True,
              help='JSON run config')
def train(config_path: str) -> None:
    """deepatlas train --config file

    \b
    Runs the configured protocol and writes checkpoints, metrics.jsonl,
    validation reports and summary.json to output.directory.
    """
    run_action(do_train, config_path)


@click.command(short_help='Segment image')
@click.option('--checkpoint', type=click.Path(), required=True, help='Segmentation checkpoint')
@click.option('--image', 'image_path', type=click.Path(), required=True, help='NPY image')
@click.option('--out', 'out_path', type=click.Path(), required=True, help='Output NPY file')
@click.option('--hard', default=False, is_flag=True,
              help='Write argmax labels instead of probabilities')
def segment(checkpoint: str, image_path: str, out_path: str, hard: bool) -> None:
    """deepatlas segment --checkpoint file --image npy --out npy"""
    run_action(do_segment, checkpoint, image_path, out_path, hard)


@click.command(short_help='Register image pair')
@click.option('--checkpoint', type=click.Path(), required=True, help='Registration checkpoint')
@click.option('--moving', 'moving_path', type=click.Path(), required=True,
              help='Moving NPY image')
@click.option('--target', 'target_path', type=click.Path(), required=True,
              help='Target NPY image')
@click.option('--out-field', type=click.Path(), required=True, help='Displacement NPY file')
@click.option('--out-warped', type=click.Path(), required=False, help='Warped image NPY file')
def register(checkpoint: str, moving_path: str, target_path: str, out_field: str,
             out_warped: Optional[str]) -> None:
    """deepatlas register --checkpoint file --moving npy --target npy --out-field npy
    [--out-warped npy]
    """
    run_action(do_register, checkpoint, moving_path, target_path, out_field, out_warped)


@click.command(name='eval', short_help='Evaluate checkpoint')
@click.option('--checkpoint', type=click.Path(), required=True, help='Network checkpoint')
@click.option('--data', 'data_dir', type=click.Path(), required=True, help='Dataset directory')
@click.option('--split', 'split_name', type=click.Choice(SPLIT_NAMES), default=TEST,
              show_default=True)
@click.option('--mode', type=click.Choice(EVAL_MODES), default=SEG_MODE, show_default=True)
@click.option('--out', 'out_dir', type=click.Path(), required=True, help='Report directory')
@click.option('--class-group', 'class_groups', multiple=True,
              help='Named class group, e.g. cartilages=2,4')
@click.option('--sizes', type=(int, int, int), default=(40, 8, 12), show_default=True,
              help='Train/val/test sizes when the dataset stores no partition')
def evaluate(checkpoint: str, data_dir: str, split_name: str, mode: str, out_dir: str,
             class_groups: Tuple[str, ...], sizes: Tuple[int, int, int]) -> None:
    """deepatlas eval --checkpoint file --data dir --split test --mode {seg,reg} --out dir"""
    run_action(do_eval, checkpoint, data_dir, split_name, mode, out_dir,
               parse_class_groups(class_groups), sizes)


@click.command(short_help='Verify gradients by finite differences')
@click.option('--seed', type=click.INT, default=0, show_default=True)
@click.option('--check', 'names', multiple=True, help='Run only named checks')
def gradcheck(seed: int, names: Tuple[str, ...]) -> None:
    """deepatlas gradcheck [--seed S]

    Exits with 0 iff every relative error is below the tolerance.
    """
    passed = run_action(do_gradcheck, seed, names)
    sys.exit(EXIT_OK if passed else EXIT_NUMERIC_FAILURE)


deepatlas.add_command(gen_data, name='gen-data')
deepatlas.add_command(train)
deepatlas.add_command(segment)
deepatlas.add_command(register)
deepatlas.add_command(evaluate, name='eval')
deepatlas.add_command(gradcheck)
