# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Network checkpoint archives.

A checkpoint is a zip file holding one NPY entry per named tensor and a JSON
manifest with the network hyperparameters. Entry timestamps are fixed, so
equal networks give byte-identical files.
"""
import json
import zipfile
from typing import Any, Dict, Optional

from .global_config import CHECKPOINT_MANIFEST_NAME
from .nets import NetParams, SegNetParams, RegNetParams, SEG_KIND, REG_KIND, init_from_hyperparams
from .tensor import parameter
from .utils import npy_bytes, npy_from_bytes
from .version import __version__

FIXED_DATE_TIME = (1980, 1, 1, 0, 0, 0)
NPY_SUFFIX = '.npy'


class CheckpointError(IOError):
    """Malformed or incompatible checkpoint file"""


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=FIXED_DATE_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path: str, params: NetParams, extra: Optional[Dict[str, Any]] = None) -> None:
    """Writes network to checkpoint archive"""
    manifest = dict(params.hyperparams(), version=__version__, tensors=params.names())

    if extra:
        manifest['extra'] = extra

    with zipfile.ZipFile(path, mode='w') as archive:
        archive.writestr(_entry(CHECKPOINT_MANIFEST_NAME),
                         json.dumps(manifest, indent=2, sort_keys=True) + '\n')

        for name in params.names():
            archive.writestr(_entry(name + NPY_SUFFIX), npy_bytes(params.tensors[name].data))


def read_manifest(path: str) -> Dict[str, Any]:
    """Returns checkpoint manifest"""
    try:
        with zipfile.ZipFile(path, mode='r') as archive:
            return dict(json.loads(archive.read(CHECKPOINT_MANIFEST_NAME).decode('utf-8')))
    except (KeyError, ValueError, zipfile.BadZipFile) as error:
        raise CheckpointError(f'Invalid checkpoint {path}: {error}') from error


def load_checkpoint(path: str) -> NetParams:
    """Reads network from checkpoint archive"""
    manifest = read_manifest(path)

    try:
        params = init_from_hyperparams(manifest)
    except (KeyError, ValueError) as error:
        raise CheckpointError(f'Invalid checkpoint manifest in {path}: {error}') from error

    with zipfile.ZipFile(path, mode='r') as archive:
        stored = set(manifest.get('tensors', []))

        if stored != set(params.tensors):
            raise CheckpointError(f'Checkpoint {path} tensors do not match '
                                  f'{manifest["kind"]} network hyperparameters')

        for name, tensor in params.tensors.items():
            try:
                data = npy_from_bytes(archive.read(name + NPY_SUFFIX))
            except (KeyError, ValueError) as error:
                raise CheckpointError(f'Cannot read tensor {name} from {path}: {error}') \
                    from error

            if data.shape != tensor.shape:
                raise CheckpointError(f'Tensor {name} in {path} has shape {data.shape}, '
                                      f'expected {tensor.shape}')

            params.tensors[name] = parameter(data)

    return params


def load_seg_checkpoint(path: str) -> SegNetParams:
    """Reads segmentation network"""
    params = load_checkpoint(path)

    if not isinstance(params, SegNetParams):
        raise CheckpointError(f'Checkpoint {path} holds a {params.kind} network, '
                              f'expected {SEG_KIND}')

    return params


def load_reg_checkpoint(path: str) -> RegNetParams:
    """Reads registration network"""
    params = load_checkpoint(path)

    if not isinstance(params, RegNetParams):
        raise CheckpointError(f'Checkpoint {path} holds a {params.kind} network, '
                              f'expected {REG_KIND}')

    return params
