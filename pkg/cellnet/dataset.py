'''
Manifest-driven loading of cell-image corpora, the train/validation/test
split and a synthetic six-pattern corpus generator.

Manifest format (comma-separated, header row required):
    id,image,mask,label[,specimen]
Image and mask paths are resolved relative to the manifest's directory; an
empty mask cell means the sample has no mask.
'''
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math
import os

import numpy as np
import pandas as pd

from cellnet.errors import ManifestError, DatasetError
from cellnet.models.records import CellSample, DatasetManifest
from cellnet.models.run_config import AugmentationPlan, PreprocessConfig, SplitSpec
from cellnet.utils import imageproc
from cellnet.utils.class_map import HEP2_CLASSES, canonical_label

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['id', 'image', 'mask', 'label']


@dataclass
class LabeledImages:
    '''Preprocessed images (N, H, W) with integer labels, ready for the network'''
    images: np.ndarray
    labels: np.ndarray
    class_names: List[str]
    ids: List[str] = field(default_factory=list)
    # id of the manifest sample each image was derived from; rotated copies share it
    source_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [str(k) for k in range(len(self.labels))]
        if not self.source_ids:
            self.source_ids = list(self.ids)
        if not (len(self.images) == len(self.labels) == len(self.ids) == len(self.source_ids)):
            raise DatasetError(f'{len(self.images)} images, {len(self.labels)} labels, {len(self.ids)} ids '
                               f'and {len(self.source_ids)} source ids')

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def missing_classes(self) -> List[str]:
        counts = np.bincount(self.labels, minlength=self.n_classes)
        return [name for name, c in zip(self.class_names, counts) if c == 0]

    def subset(self, indices: Sequence[int]) -> 'LabeledImages':
        indices = list(indices)
        return LabeledImages(self.images[indices] if indices else self.images[:0], self.labels[indices],
                             self.class_names, [self.ids[i] for i in indices],
                             [self.source_ids[i] for i in indices])


# ============= MANIFEST =============

def load_manifest(path: str, class_names: Optional[List[str]] = None,
                  channel_mode: str = 'grayscale') -> DatasetManifest:
    '''
    Parse and validate a manifest. With ``class_names`` the class table is
    fixed and any other label is an error; otherwise the table is built from
    the labels in order of first appearance.
    '''
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise ManifestError(f'Manifest not found: {path}')
    except pd.errors.EmptyDataError:
        raise ManifestError(f'Manifest {path} is empty, no classes defined')
    except (OSError, pd.errors.ParserError) as e:
        raise ManifestError(f'Cannot parse manifest {path}: {e}')

    frame.columns = [c.strip().lower() for c in frame.columns]
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise ManifestError(f'Manifest {path} lacks columns {missing}')
    if frame.empty:
        raise ManifestError(f'Manifest {path} has no records, no classes defined')

    frame['id'] = frame['id'].str.strip()
    frame['label'] = frame['label'].map(canonical_label)

    duplicated = sorted(frame.loc[frame['id'].duplicated(keep=False), 'id'].unique())
    if duplicated:
        raise ManifestError(f'Duplicate sample ids in {path}', ids=duplicated)

    if class_names:
        table = [canonical_label(c) for c in class_names]
        unknown = frame.loc[~frame['label'].isin(table), 'id'].tolist()
        if unknown:
            raise ManifestError(f'Labels outside the class table {table}', ids=unknown)
    else:
        table = list(dict.fromkeys(frame['label']))
    index = {name: k for k, name in enumerate(table)}

    base = os.path.dirname(os.path.abspath(path))
    samples, absent = [], []
    for row in frame.itertuples(index=False):
        image_path = _resolve(base, row.image)
        mask_path = _resolve(base, row.mask) if row.mask.strip() else None
        if not os.path.isfile(image_path) or (mask_path and not os.path.isfile(mask_path)):
            absent.append(row.id)
            continue
        specimen = getattr(row, 'specimen', '') or None
        samples.append(CellSample(id=row.id, image_path=image_path, mask_path=mask_path,
                                  label=index[row.label], label_name=row.label, specimen_id=specimen))
    if absent:
        raise ManifestError(f'{len(absent)} manifest records reference missing files', ids=absent)

    manifest = DatasetManifest(class_names=table, samples=samples, channel_mode=channel_mode, source=path)
    logger.info(f'Loaded {len(samples)} samples in {manifest.num_classes} classes from {path}')
    return manifest


def _resolve(base: str, rel: str) -> str:
    rel = rel.strip()
    return rel if os.path.isabs(rel) else os.path.join(base, rel)


def write_manifest(samples: Sequence[CellSample], path: str) -> str:
    '''Write samples as a manifest with paths relative to the manifest directory'''
    base = os.path.dirname(os.path.abspath(path))
    rows = [{
        'id': s.id,
        'image': os.path.relpath(s.image_path, base),
        'mask': os.path.relpath(s.mask_path, base) if s.mask_path else '',
        'label': s.label_name,
        'specimen': s.specimen_id or '',
    } for s in samples]
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS + ['specimen']).to_csv(path, index=False, lineterminator='\n')
    return path


# ============= SPLIT =============

def split_sizes(n: int, spec: SplitSpec) -> Tuple[int, int, int]:
    '''floor(N * f) for train and validation, the remainder goes to test'''
    n_train = math.floor(n * spec.train + 1e-9)
    n_val = math.floor(n * spec.validation + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split(manifest: DatasetManifest, spec: SplitSpec) -> Tuple[List[CellSample], List[CellSample], List[CellSample]]:
    '''Seeded shuffle then contiguous slicing; stratified mode slices each class separately'''
    rng = np.random.default_rng(spec.seed)
    samples = manifest.samples
    if not spec.stratified:
        order = rng.permutation(len(samples))
        n_train, n_val, _ = split_sizes(len(samples), spec)
        parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
        result = tuple([samples[i] for i in part] for part in parts)
    else:
        result = ([], [], [])
        for label in range(manifest.num_classes):
            members = [i for i, s in enumerate(samples) if s.label == label]
            order = [members[i] for i in rng.permutation(len(members))]
            n_train, n_val, _ = split_sizes(len(members), spec)
            result[0].extend(samples[i] for i in order[:n_train])
            result[1].extend(samples[i] for i in order[n_train:n_train + n_val])
            result[2].extend(samples[i] for i in order[n_train + n_val:])
        result = tuple([part[i] for i in rng.permutation(len(part))] for part in result)
    logger.info(f'Split {len(samples)} samples into {len(result[0])}/{len(result[1])}/{len(result[2])}')
    return result


# ============= LOADING =============

def sample_variants(sample: CellSample, preprocess: PreprocessConfig, plan: Optional[AugmentationPlan] = None,
                    channel_mode: str = 'grayscale') -> List[np.ndarray]:
    '''Network inputs of one manifest sample under a rotation plan (see imageproc.rotation_variants)'''
    pixels = imageproc.load_image(sample.image_path)
    mask = None
    if preprocess.align:
        if not sample.mask_path:
            raise DatasetError(f'Alignment requested but sample {sample.id} has no mask')
        mask = imageproc.load_mask(sample.mask_path)
    return imageproc.rotation_variants(pixels, mask, preprocess.align, preprocess.target_size, plan,
                                       channel_mode=channel_mode)


def load_arrays(samples: Sequence[CellSample], class_names: List[str], preprocess: PreprocessConfig,
                plan: Optional[AugmentationPlan] = None, channel_mode: str = 'grayscale') -> LabeledImages:
    '''
    Read and preprocess samples. With a plan of m > 1 variants every sample
    contributes m rotated copies, rotated after resizing ('post_resize') or
    on the normalized source image before resizing ('pre_resize').
    '''
    target = preprocess.target_size
    images, labels, ids, sources = [], [], [], []
    for sample in samples:
        variants = sample_variants(sample, preprocess, plan, channel_mode)
        angles = plan.angles() if len(variants) > 1 else [0.0]
        for angle, image in zip(angles, variants):
            images.append(image)
            labels.append(sample.label)
            ids.append(sample.id if len(variants) == 1 else f'{sample.id}_r{angle:g}')
            sources.append(sample.id)
    if not images:
        return LabeledImages(np.zeros((0, target, target)), np.zeros(0, dtype=np.int64), class_names, [])
    return LabeledImages(np.stack(images), np.array(labels), class_names, ids, sources)


def augment_labeled(data: LabeledImages, plan: AugmentationPlan) -> LabeledImages:
    '''In-memory rotation augmentation of already preprocessed images'''
    if plan.variant_count == 1:
        return data
    images, labels, ids, sources = [], [], [], []
    for image, label, sample_id, source in zip(data.images, data.labels, data.ids, data.source_ids):
        for angle, variant in zip(plan.angles(), imageproc.augment(image, plan)):
            images.append(variant)
            labels.append(label)
            ids.append(f'{sample_id}_r{angle:g}')
            sources.append(source)
    return LabeledImages(np.stack(images), np.array(labels), data.class_names, ids, sources)


def save_processed(data: LabeledImages, out_dir: str, bits: int = 16) -> str:
    '''Write every image as a PNG plus a manifest, so the set can be reloaded with load_manifest'''
    os.makedirs(os.path.join(out_dir, 'images'), exist_ok=True)
    samples = []
    for image, label, sample_id in zip(data.images, data.labels, data.ids):
        path = os.path.join(out_dir, 'images', f'{sample_id}.png')
        imageproc.save_image(path, image, bits=bits)
        samples.append(CellSample(id=sample_id, image_path=path, label=int(label),
                                  label_name=data.class_names[int(label)]))
    manifest_path = write_manifest(samples, os.path.join(out_dir, 'manifest.csv'))
    logger.info(f'Wrote {len(samples)} processed images to {out_dir}')
    return manifest_path


# ============= SYNTHETIC CORPUS =============

def _blobs(x, y, centers: np.ndarray, sigma: float, amplitude: float = 1.0) -> np.ndarray:
    if len(centers) == 0:
        return np.zeros_like(x)
    d2 = (x[np.newaxis] - centers[:, 0, None, None]) ** 2 + (y[np.newaxis] - centers[:, 1, None, None]) ** 2
    return amplitude * np.exp(-d2 / (2.0 * sigma * sigma)).sum(axis=0)


def _disk_points(rng: np.random.Generator, count: int, radius: float = 1.0) -> np.ndarray:
    '''Uniform points in a disk of the given radius (unit-ellipse coordinates)'''
    r = radius * np.sqrt(rng.random(count))
    t = rng.uniform(0.0, 2.0 * np.pi, count)
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def _homogeneous(u, v, rho, rng, shift):
    return 0.65 + 0.1 * (1.0 - rho ** 2)


def _speckled(u, v, rho, rng, shift):
    pts = _disk_points(rng, rng.integers(35, 50), 0.95)
    return 0.3 + _blobs(u, v, pts, 0.06 * (1 + shift), 0.5)


def _nucleolar(u, v, rho, rng, shift):
    pts = _disk_points(rng, rng.integers(3, 7), 0.6)
    return 0.12 + _blobs(u, v, pts, 0.14 * (1 + shift), 0.85)


def _centromere(u, v, rho, rng, shift):
    pts = _disk_points(rng, rng.integers(25, 40), 0.9)
    return 0.05 + _blobs(u, v, pts, 0.035 * (1 + shift), 0.95)


def _membrane(u, v, rho, rng, shift):
    return 0.1 + 0.85 * np.exp(-((rho - 0.85) ** 2) / (2.0 * (0.07 * (1 + shift)) ** 2))


def _golgi(u, v, rho, rng, shift):
    count = rng.integers(1, 4)
    pts = np.column_stack([rng.uniform(0.35, 0.6, count), rng.uniform(-0.3, 0.3, count)])
    return 0.08 + _blobs(u, v, pts, 0.16 * (1 + shift), 0.9)


PATTERN_GENERATORS: List[Callable] = [_homogeneous, _speckled, _nucleolar, _centromere, _membrane, _golgi]


def render_cell(label: int, size: int, rng: np.random.Generator, orientation_range: float = 360.0,
                domain_shift: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    '''One synthetic cell: (image in [0, 1], elliptical boolean mask)'''
    if not 0 <= label < len(PATTERN_GENERATORS):
        raise DatasetError(f'No synthetic generator for class {label}')
    theta = np.radians(rng.uniform(0.0, orientation_range))
    scale = rng.uniform(0.85, 1.1) * (1.0 - 0.15 * domain_shift)
    a = 0.38 * size * scale
    b = a * rng.uniform(0.7, 0.85)
    cx = (size - 1) / 2.0 + rng.uniform(-0.04, 0.04) * size
    cy = (size - 1) / 2.0 + rng.uniform(-0.04, 0.04) * size

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = cols - cx, rows - cy
    # cell-local axes, normalized to the unit ellipse
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
    rho = np.sqrt(u * u + v * v)
    mask = rho <= 1.0

    texture = PATTERN_GENERATORS[label](u, v, rho, rng, domain_shift)
    brightness = 1.0 - 0.3 * domain_shift * rng.random()
    noise = rng.normal(0.0, 0.03 + 0.04 * domain_shift, (size, size))
    image = np.clip(texture * brightness + noise, 0.0, 1.0) * mask
    return image, mask


def synth_images(n_classes: int = 6, per_class: int = 100, size: int = imageproc.STANDARD_SIZE, seed: int = 0,
                 orientation_range: float = 360.0, domain_shift: float = 0.0,
                 class_names: Optional[List[str]] = None, id_prefix: str = 'syn') -> Tuple[LabeledImages, List[np.ndarray]]:
    '''Render a balanced synthetic corpus in memory; returns raw images and their masks'''
    if not 1 <= n_classes <= len(PATTERN_GENERATORS):
        raise DatasetError(f'Synthetic corpus supports 1..{len(PATTERN_GENERATORS)} classes, got {n_classes}')
    names = list(class_names or HEP2_CLASSES[:n_classes])
    if len(names) != n_classes:
        raise DatasetError(f'{len(names)} class names for {n_classes} synthetic classes')
    rng = np.random.default_rng(seed)
    images, masks, labels, ids = [], [], [], []
    for label in range(n_classes):
        for k in range(per_class):
            image, mask = render_cell(label, size, rng, orientation_range, domain_shift)
            images.append(image)
            masks.append(mask)
            labels.append(label)
            ids.append(f'{id_prefix}{label}_{k:05d}')
    data = LabeledImages(np.stack(images) if images else np.zeros((0, size, size)), np.array(labels, dtype=np.int64),
                         names, ids)
    return data, masks


def synth_generate(out_dir: str, n_classes: int = 6, per_class: int = 100, size: int = imageproc.STANDARD_SIZE,
                   seed: int = 0, orientation_range: float = 360.0, domain_shift: float = 0.0,
                   channel_mode: str = 'grayscale', class_names: Optional[List[str]] = None) -> DatasetManifest:
    '''
    Write a synthetic corpus: images/<id>.png, masks/<id>.png and
    manifest.csv. Identical arguments give a bitwise-identical corpus.
    '''
    data, masks = synth_images(n_classes, per_class, size, seed, orientation_range, domain_shift, class_names)
    for sub in ('images', 'masks'):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    samples = []
    for image, mask, label, sample_id in zip(data.images, masks, data.labels, data.ids):
        image_path = os.path.join(out_dir, 'images', f'{sample_id}.png')
        mask_path = os.path.join(out_dir, 'masks', f'{sample_id}.png')
        if channel_mode == 'green':
            imageproc.save_rgb(image_path, np.stack([0.2 * image, image, 0.1 * image], axis=-1))
        else:
            imageproc.save_image(image_path, image)
        imageproc.save_mask(mask_path, mask)
        samples.append(CellSample(id=sample_id, image_path=image_path, mask_path=mask_path, label=int(label),
                                  label_name=data.class_names[int(label)]))

    manifest_path = write_manifest(samples, os.path.join(out_dir, 'manifest.csv'))
    logger.info(f'Synthesized {len(samples)} cells ({n_classes} classes x {per_class}) into {out_dir}')
    return DatasetManifest(class_names=data.class_names, samples=samples, channel_mode=channel_mode,
                           source=manifest_path)


def class_balance(data: LabeledImages) -> Dict[str, int]:
    counts = np.bincount(data.labels, minlength=data.n_classes)
    return {name: int(c) for name, c in zip(data.class_names, counts)}
