# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""
Synthetic labeled-atlas datasets.

Every image is a template of nested ellipsoids deformed by a random smooth
field, then perturbed by a smooth bias field and Gaussian noise. The true label
map and the generating field are stored with every image.
"""
from dataclasses import asdict, dataclass, field
from os.path import join
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from .global_config import FLOAT_DTYPE, LABEL_DTYPE, DATASET_MANIFEST_NAME, IMAGES_DIR
from .imageops import DisplacementField, NEAREST, jacobian_determinant, warp
from .log_utils import log_warning
from .tensor import Tensor
from .utils import create_dir_if_not_exist, load_npy, parallel_map, read_json, save_npy, \
    write_json
from .version import __version__

MAX_CLASSES = 8
MAX_RETRIES = 10
CLASS_INTENSITIES = (0.05, 0.85, 0.55, 0.30, 0.70, 0.15, 0.95, 0.45)
ALL_LABELED = -1

TRAIN = 'train'
VAL = 'val'
TEST = 'test'
SPLIT_NAMES = (TRAIN, VAL, TEST)


class DataGenerationError(RuntimeError):
    """Dataset cannot be generated from given spec"""


@dataclass
class SyntheticSpec:
    """Parameters of synthetic dataset generation"""
    spatial_shape: Tuple[int, ...] = (64, 64)
    classes: int = 4
    count: int = 60
    control_points: int = 5
    amplitude: float = 0.1
    noise_sd: float = 0.03
    bias_amplitude: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        self.spatial_shape = tuple(int(n) for n in self.spatial_shape)

        if len(self.spatial_shape) not in (1, 2, 3) or any(n < 3 for n in self.spatial_shape):
            raise ValueError(f'Invalid spatial shape: {self.spatial_shape}')

        if not 2 <= self.classes <= MAX_CLASSES:
            raise ValueError(f'Class count must be in [2, {MAX_CLASSES}], got {self.classes}')

        if self.count < 1:
            raise ValueError(f'Dataset size must be positive, got {self.count}')

        if self.control_points < 2:
            raise ValueError(f'Control grid needs at least 2 points, got {self.control_points}')

        if min(self.amplitude, self.noise_sd, self.bias_amplitude) < 0:
            raise ValueError('Amplitudes and noise level must be non-negative')

    @property
    def dim(self) -> int:
        """Spatial rank"""
        return len(self.spatial_shape)

    def to_dict(self) -> Dict[str, Any]:
        """JSON-compatible representation"""
        res = asdict(self)
        res['spatial_shape'] = list(self.spatial_shape)
        return res

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> 'SyntheticSpec':
        """Spec from JSON-compatible representation"""
        return SyntheticSpec(**data)


@dataclass
class LabeledImage:
    """Intensity image [1, spatial...] with optional hard label map"""
    id: str
    intensity: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.intensity)):
            raise ValueError(f'Image {self.id} has non-finite intensities')

        if self.intensity.min() < 0 or self.intensity.max() > 1:
            raise ValueError(f'Image {self.id} intensities are outside of [0, 1]')

        if self.labels is not None and self.labels.shape != self.intensity.shape[1:]:
            raise ValueError(f'Image {self.id} label map shape {self.labels.shape} differs '
                             f'from intensity shape {self.intensity.shape[1:]}')

    @property
    def is_labeled(self) -> bool:
        """Manual labels are available"""
        return self.labels is not None

    def unlabeled(self) -> 'LabeledImage':
        """Same image with labels removed"""
        return LabeledImage(self.id, self.intensity)


@dataclass
class SyntheticImage:
    """Generated image with its true labels and generating displacement field"""
    image: LabeledImage
    field: np.ndarray


@dataclass
class SyntheticDataset:
    """Generated images in index order"""
    spec: SyntheticSpec
    items: List[SyntheticImage]

    @property
    def ids(self) -> List[str]:
        """Image ids in order"""
        return [item.image.id for item in self.items]

    @property
    def images(self) -> List[LabeledImage]:
        """Fully labeled images in order"""
        return [item.image for item in self.items]


class HiddenLabels:
    """Labels withheld from training; every read is recorded"""

    def __init__(self, labels: Dict[str, np.ndarray]) -> None:
        self._labels = labels
        self.reads: List[str] = []

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._labels

    def ids(self) -> List[str]:
        """Ids of images with hidden labels"""
        return sorted(self._labels)

    def reveal(self, image_id: str) -> np.ndarray:
        """Returns hidden label map and records the read"""
        self.reads.append(image_id)
        return self._labels[image_id]


@dataclass
class DatasetSplit:
    """Train/val/test partitions; unselected training images carry no labels"""
    train: List[LabeledImage]
    val: List[LabeledImage]
    test: List[LabeledImage]
    hidden: HiddenLabels = field(default_factory=lambda: HiddenLabels({}))

    def partition(self, name: str) -> List[LabeledImage]:
        """Partition by name"""
        if name not in SPLIT_NAMES:
            raise ValueError(f'Unknown split: {name}, expected one of {SPLIT_NAMES}')

        return list(getattr(self, name))

    def training_images(self) -> List[LabeledImage]:
        """
        Training images as the training steps receive them.

        Images selected as unlabeled carry no label map. One that carries a
        hidden map anyway gets it through the guard, so the read is recorded.
        """
        for image in self.train:
            if image.labels is not None and image.id in self.hidden:
                self.hidden.reveal(image.id)

        return list(self.train)

    @property
    def labeled_ids(self) -> List[str]:
        """Training images with manual labels"""
        return [image.id for image in self.train if image.is_labeled]

    def to_dict(self) -> Dict[str, Any]:
        """JSON-compatible summary of the split"""
        return {TRAIN: [image.id for image in self.train],
                VAL: [image.id for image in self.val],
                TEST: [image.id for image in self.test],
                'labeled': self.labeled_ids}


def image_id(index: int) -> str:
    """Stable id of generated image"""
    return f'img{index:03d}'


def make_template(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Nested-ellipsoid label map and its intensity image"""
    axes = np.meshgrid(*(np.linspace(-1.0, 1.0, n) for n in spec.spatial_shape),
                       indexing='ij')
    labels = np.zeros(spec.spatial_shape, dtype=LABEL_DTYPE)

    for k in range(1, spec.classes):
        scale = 1.0 - 0.7 * (k - 1) / max(spec.classes - 1, 1)
        radius = [0.8 * scale * (1.0 - 0.12 * axis) for axis in range(spec.dim)]
        shift = [0.06 * (k - 1) * (-1) ** axis for axis in range(spec.dim)]
        inside = sum(((x - s) / r) ** 2 for x, s, r in zip(axes, shift, radius)) <= 1.0
        labels[inside] = k

    intensity = np.asarray(CLASS_INTENSITIES, dtype=FLOAT_DTYPE)[labels]
    return labels, intensity


def upsample_grid(grid: np.ndarray, spatial_shape: Sequence[int]) -> np.ndarray:
    """Linear interpolation of a coarse [spatial...] grid to full resolution"""
    coords = np.meshgrid(*(np.linspace(0, c - 1, n) for c, n in zip(grid.shape, spatial_shape)),
                         indexing='ij')
    return map_coordinates(grid, coords, order=1, mode='nearest')


def random_field(spec: SyntheticSpec, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Smooth random displacement [d, spatial...] from a control grid"""
    shape = (spec.control_points,) * spec.dim
    return np.stack([upsample_grid(rng.uniform(-amplitude, amplitude, size=shape),
                                   spec.spatial_shape) for _ in range(spec.dim)])


def is_fold_free(field_data: np.ndarray) -> bool:
    """Jacobian determinant of id + u is positive on every interior voxel"""
    det = jacobian_determinant(DisplacementField(Tensor(field_data[None])))
    return bool(np.all(det.data > 0))


def generate_image(spec: SyntheticSpec, index: int) -> SyntheticImage:
    """Generates index-th image; a pure function of spec and index"""
    rng = np.random.default_rng([spec.seed, index])
    labels, intensity = make_template(spec)
    amplitude = spec.amplitude

    for _ in range(MAX_RETRIES + 1):
        field_data = random_field(spec, rng, amplitude)

        if is_fold_free(field_data):
            break

        log_warning(f'Deformation of {image_id(index)} folds at amplitude {amplitude}, '
                    f'retrying with {amplitude / 2}')
        amplitude /= 2
    else:
        raise DataGenerationError(f'Cannot generate fold-free deformation for {image_id(index)} '
                                  f'after {MAX_RETRIES} retries')

    deformation = DisplacementField(Tensor(field_data[None]))
    warped = warp(Tensor(intensity[None, None]), deformation).data[0]
    warped_labels = warp(Tensor(labels[None, None]), deformation, NEAREST).data[0, 0]
    bias_grid = rng.uniform(-spec.bias_amplitude, spec.bias_amplitude,
                            size=(3,) * spec.dim)
    bias = upsample_grid(bias_grid, spec.spatial_shape)
    noise = rng.normal(0.0, spec.noise_sd, size=spec.spatial_shape) if spec.noise_sd > 0 \
        else np.zeros(spec.spatial_shape)
    perturbed = np.clip(warped + bias[None] + noise[None], 0.0, 1.0)
    image = LabeledImage(image_id(index), perturbed.astype(FLOAT_DTYPE),
                         np.rint(warped_labels).astype(LABEL_DTYPE))
    return SyntheticImage(image, field_data.astype(FLOAT_DTYPE))


def generate_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Generates spec.count images, assembled in index order"""
    items = parallel_map(lambda index: generate_image(spec, index), list(range(spec.count)))
    return SyntheticDataset(spec, items)


def split(dataset: SyntheticDataset, n_labeled: int, seed: int, n_train: int, n_val: int,
          n_test: int) -> DatasetSplit:
    """
    Partitions images in index order into train/val/test.

    n_labeled training images selected by seed keep their labels, the others
    are hidden behind an access guard. ALL_LABELED keeps every training label.
    """
    if min(n_train, n_val, n_test) < 0 or n_train < 2:
        raise ValueError(f'Invalid partition sizes: {n_train}/{n_val}/{n_test}')

    if n_train + n_val + n_test > len(dataset.items):
        raise ValueError(f'Partitions need {n_train + n_val + n_test} images, '
                         f'dataset has {len(dataset.items)}')

    if n_labeled == ALL_LABELED:
        n_labeled = n_train

    if not 0 <= n_labeled <= n_train:
        raise ValueError(f'Labeled count must be in [0, {n_train}] or {ALL_LABELED}, '
                         f'got {n_labeled}')

    images = dataset.images
    train_images = images[:n_train]
    chosen: Set[int] = set(int(i) for i in np.random.default_rng(seed).choice(
        n_train, size=n_labeled, replace=False))
    train = [image if i in chosen else image.unlabeled() for i, image in enumerate(train_images)]
    hidden = HiddenLabels({image.id: image.labels for i, image in enumerate(train_images)
                           if i not in chosen and image.labels is not None})
    return DatasetSplit(train, images[n_train:n_train + n_val],
                        images[n_train + n_val:n_train + n_val + n_test], hidden)


def _file_names(item_id: str) -> Dict[str, str]:
    return {'intensity': join(IMAGES_DIR, f'{item_id}_intensity.npy'),
            'labels': join(IMAGES_DIR, f'{item_id}_labels.npy'),
            'field': join(IMAGES_DIR, f'{item_id}_field.npy')}


def save_dataset(path: str, dataset: SyntheticDataset,
                 partition: Optional[DatasetSplit] = None) -> None:
    """Writes manifest and one NPY file per tensor"""
    create_dir_if_not_exist(join(path, IMAGES_DIR))
    entries = []

    for item in dataset.items:
        names = _file_names(item.image.id)
        save_npy(join(path, names['intensity']), item.image.intensity)
        save_npy(join(path, names['field']), item.field)

        if item.image.labels is not None:
            save_npy(join(path, names['labels']), item.image.labels)
        else:
            del names['labels']

        entries.append(dict(names, id=item.image.id))

    manifest: Dict[str, Any] = {'version': __version__, 'spec': dataset.spec.to_dict(),
                                'images': entries}

    if partition is not None:
        manifest['split'] = partition.to_dict()

    write_json(join(path, DATASET_MANIFEST_NAME), manifest)


def load_dataset(path: str) -> SyntheticDataset:
    """Reads dataset written by save_dataset"""
    manifest = read_json(join(path, DATASET_MANIFEST_NAME))
    spec = SyntheticSpec.from_dict(manifest['spec'])
    items = []

    for entry in manifest['images']:
        labels = load_npy(join(path, entry['labels'])) if 'labels' in entry else None
        image = LabeledImage(entry['id'], load_npy(join(path, entry['intensity'])), labels)
        items.append(SyntheticImage(image, load_npy(join(path, entry['field']))))

    return SyntheticDataset(spec, items)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """Single [spatial...] hard label map -> [1, K, spatial...] one-hot"""
    index = np.rint(labels).astype(LABEL_DTYPE)
    encoded = index[None] == np.arange(classes).reshape((-1,) + (1,) * index.ndim)
    return encoded.astype(FLOAT_DTYPE)[None]


def as_batch(images: Sequence[LabeledImage]) -> Tensor:
    """Stacks intensities into [N, 1, spatial...]"""
    return Tensor(np.stack([image.intensity for image in images]))


def load_split(path: str, dataset: SyntheticDataset) -> Optional[DatasetSplit]:
    """Fully labeled partition stored in the manifest, if any"""
    stored = read_json(join(path, DATASET_MANIFEST_NAME)).get('split')

    if stored is None:
        return None

    by_id = {image.id: image for image in dataset.images}

    try:
        return DatasetSplit(*([by_id[item_id] for item_id in stored[name]]
                              for name in SPLIT_NAMES))
    except KeyError as error:
        raise ValueError(f'Split of {path} refers to unknown image {error}') from error
