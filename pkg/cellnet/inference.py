from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import logging
import os

import numpy as np
import pandas as pd

from cellnet import network
from cellnet.dataset import LabeledImages, sample_variants
from cellnet.errors import ClassCountMismatchError, ConfigError, ShapeMismatchError, SpecError
from cellnet.metrics import ConfusionMatrix
from cellnet.models.records import CellSample, PredictionRow
from cellnet.models.run_config import AugmentationPlan, NetworkSpec, PreprocessConfig
from cellnet.network import NetworkParams
from cellnet.utils import imageproc

logger = logging.getLogger(__name__)


@dataclass
class Ensemble:
    '''Snapshot members sharing one architecture, plus the class table'''
    members: List[Tuple[NetworkParams, NetworkSpec]]
    class_names: List[str]

    def __post_init__(self):
        if not self.members:
            raise SpecError('An ensemble needs at least one member')
        spec = self.members[0][1]
        for idx, (_, other) in enumerate(self.members[1:], start=1):
            if other != spec:
                raise SpecError(f'Ensemble member {idx} has a different architecture from member 0', layer=None)
        if len(self.class_names) != spec.num_classes:
            raise ClassCountMismatchError(
                f'{len(self.class_names)} class names for a {spec.num_classes}-class network')

    @property
    def spec(self) -> NetworkSpec:
        return self.members[0][1]

    @classmethod
    def from_models(cls, models: Sequence[network.ModelFile], class_names: Optional[List[str]] = None) -> 'Ensemble':
        if not models:
            raise SpecError('An ensemble needs at least one member')
        names = class_names or models[0].metadata.get('class_names') \
            or [str(k) for k in range(models[0].spec.num_classes)]
        return cls([(m.params, m.spec) for m in models], list(names))

    @classmethod
    def from_snapshots(cls, snapshots, class_names: Optional[List[str]] = None) -> 'Ensemble':
        return cls.from_models([s.load() for s in snapshots], class_names)

    @classmethod
    def from_files(cls, paths: Sequence[str], class_names: Optional[List[str]] = None) -> 'Ensemble':
        models = [network.load_model(p) for p in paths]
        logger.info(f'Loaded {len(models)} ensemble members: {[os.path.basename(p) for p in paths]}')
        return cls.from_models(models, class_names)


def predict_single(params: NetworkParams, spec: NetworkSpec, image: np.ndarray) -> np.ndarray:
    '''Eval-mode forward probabilities of one preprocessed image'''
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (spec.input_size, spec.input_size):
        raise ShapeMismatchError(
            f'Image is {image.shape[-2:]}, network expects {spec.input_size}x{spec.input_size}', axis='input')
    return network.forward(params, spec, image, mode='eval').probabilities


def _check_in_memory(plan: AugmentationPlan):
    if plan.rotation_stage == 'pre_resize' and plan.variant_count > 1:
        raise ConfigError('pre_resize rotation needs the source images; evaluate from samples '
                          '(evaluate_samples / rotation_variants) instead of preprocessed arrays')


def variant_probabilities(ensemble: Ensemble, variants: Sequence[np.ndarray]) -> np.ndarray:
    '''
    Mean of the |members| x m probability vectors of one image given its m
    rotated network inputs.
    '''
    total = np.zeros(ensemble.spec.num_classes)
    # fixed order: members outer, variants inner
    for params, spec in ensemble.members:
        for variant in variants:
            total += predict_single(params, spec, variant)
    return total / (len(ensemble.members) * len(variants))


def ensemble_probabilities(ensemble: Ensemble, image: np.ndarray, plan: AugmentationPlan) -> np.ndarray:
    '''Averaged probabilities of a preprocessed image, rotated after resizing'''
    _check_in_memory(plan)
    return variant_probabilities(ensemble, imageproc.augment(image, plan))


def _decide(probs: np.ndarray) -> Tuple[int, np.ndarray]:
    # np.argmax returns the first maximum
    return int(np.argmax(probs)), probs


def ensemble_predict(ensemble: Ensemble, image: np.ndarray, plan: AugmentationPlan) -> Tuple[int, np.ndarray]:
    '''(predicted class index, averaged probability vector)'''
    return _decide(ensemble_probabilities(ensemble, image, plan))


def predict_variants(ensemble: Ensemble, variants: Sequence[np.ndarray]) -> Tuple[int, np.ndarray]:
    return _decide(variant_probabilities(ensemble, variants))


def _row(ensemble: Ensemble, image_id: str, predicted: int, probs: np.ndarray,
         label: Optional[int] = None) -> PredictionRow:
    return PredictionRow(image_id=image_id, predicted_label=ensemble.class_names[predicted],
                         probabilities=probs.tolist(),
                         true_label=None if label is None else ensemble.class_names[int(label)])


def evaluate_dataset(ensemble: Ensemble, data: LabeledImages,
                     plan: AugmentationPlan) -> Tuple[ConfusionMatrix, List[PredictionRow]]:
    '''Run ensemble_predict over a preprocessed labeled set; returns the confusion matrix and per-image rows'''
    if data.n_classes != ensemble.spec.num_classes:
        raise ClassCountMismatchError(
            f'Evaluation set has {data.n_classes} classes, ensemble outputs {ensemble.spec.num_classes}')
    _check_in_memory(plan)
    cm = ConfusionMatrix(ensemble.spec.num_classes, ensemble.class_names)
    rows = []
    for image, label, sample_id in zip(data.images, data.labels, data.ids):
        predicted, probs = ensemble_predict(ensemble, image, plan)
        cm.accumulate(int(label), predicted)
        rows.append(_row(ensemble, sample_id, predicted, probs, label))
    logger.info(f'Evaluated {len(rows)} images with {len(ensemble.members)} members x {plan.variant_count} rotations')
    return cm, rows


def evaluate_samples(ensemble: Ensemble, samples: Sequence[CellSample], preprocess: PreprocessConfig,
                     plan: AugmentationPlan,
                     channel_mode: str = 'grayscale') -> Tuple[ConfusionMatrix, List[PredictionRow]]:
    '''
    evaluate_dataset over manifest samples. Every sample's rotations are
    rebuilt from its source image exactly as load_arrays builds training
    variants, whichever rotation stage the plan names.
    '''
    cm = ConfusionMatrix(ensemble.spec.num_classes, ensemble.class_names)
    rows = []
    for sample in samples:
        predicted, probs = predict_variants(ensemble, sample_variants(sample, preprocess, plan, channel_mode))
        cm.accumulate(sample.label, predicted)
        rows.append(_row(ensemble, sample.id, predicted, probs, sample.label))
    logger.info(f'Evaluated {len(rows)} samples with {len(ensemble.members)} members x {plan.variant_count} '
                f'{plan.rotation_stage} rotations')
    return cm, rows


def variant_rows(ensemble: Ensemble, variant_sets: Sequence[Sequence[np.ndarray]],
                 ids: Sequence[str]) -> List[PredictionRow]:
    '''Unlabeled rows from per-image rotation variants (see imageproc.rotation_variants)'''
    return [_row(ensemble, sample_id, *predict_variants(ensemble, variants))
            for variants, sample_id in zip(variant_sets, ids)]


def predictions_frame(rows: Sequence[PredictionRow], class_names: Sequence[str]) -> pd.DataFrame:
    '''image_id, predicted_label, p_<class>... [, true_label]'''
    records = []
    for row in rows:
        record = {'image_id': row.image_id, 'predicted_label': row.predicted_label}
        record.update({f'p_{name}': p for name, p in zip(class_names, row.probabilities)})
        if row.true_label is not None:
            record['true_label'] = row.true_label
        records.append(record)
    columns = ['image_id', 'predicted_label'] + [f'p_{name}' for name in class_names]
    if any(row.true_label is not None for row in rows):
        columns.append('true_label')
    return pd.DataFrame(records, columns=columns)


def write_predictions(rows: Sequence[PredictionRow], class_names: Sequence[str], path: str) -> str:
    out_dir = os.path.dirname(path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    predictions_frame(rows, class_names).to_csv(path, index=False, float_format='%.10g', lineterminator='\n')
    logger.info(f'Wrote {len(rows)} predictions to {path}')
    return path
