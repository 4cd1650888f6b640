from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple
import logging
import math

import numpy as np

from cellnet import network
from cellnet.dataset import LabeledImages
from cellnet.errors import ClassCountMismatchError, ConfigError, DatasetError, ShapeMismatchError
from cellnet.metrics import mca_from_labels
from cellnet.models.records import EpochRecord
from cellnet.models.run_config import NetworkSpec, TrainConfig
from cellnet.network import NetworkParams

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12

EpochCallback = Callable[[EpochRecord], None]


# ============= STATE =============

@dataclass
class TrainState:
    params: NetworkParams
    velocities: NetworkParams
    learning_rate: float
    epoch: int = 0
    history: List[EpochRecord] = field(default_factory=list)
    reductions: int = 0
    last_reduction_index: int = 0
    updates: int = 0
    seed: int = 0


@dataclass
class Snapshot:
    '''Serialized params + spec, captured at the end of ``epoch``'''
    epoch: int
    data: bytes

    def load(self) -> network.ModelFile:
        return network.read_model(self.data)

    def save(self, path: str) -> str:
        with open(path, 'wb') as f:
            f.write(self.data)
        return path


def init_state(params: NetworkParams, config: TrainConfig) -> TrainState:
    '''Fresh optimizer state around ``params``; velocities start at zero'''
    return TrainState(
        params=params,
        velocities=params.zeros_like(),
        learning_rate=config.initial_learning_rate,
        seed=config.seed or 0,
    )


# ============= LOSS / UPDATE =============

def cross_entropy(probs, label) -> float:
    '''-sum y_j log(p_j) for one-hot y, probabilities floored at 1e-12'''
    probs = np.asarray(probs, dtype=np.float64)
    y = network.validate_one_hot(label, probs.shape[0])
    return float(-np.sum(y * np.log(np.maximum(probs, PROBABILITY_FLOOR))))


def update_step(state: TrainState, gradients: NetworkParams, config: TrainConfig) -> TrainState:
    '''
    Momentum and weight-decay step per trainable layer, g averaged over the batch:
        v_w := alpha * v_w - beta * lr * w - lr * g_w ;  w := w + v_w
        v_b := alpha * v_b - lr * g_b                 ;  b := b + v_b
    '''
    alpha = config.momentum_coefficient
    beta = config.weight_decay_coefficient
    lr = state.learning_rate
    if len(gradients.layers) != len(state.params.layers):
        raise ShapeMismatchError(
            f'{len(gradients.layers)} gradient layers for {len(state.params.layers)} parameter layers', axis='layers')

    for idx, (p, v, g) in enumerate(zip(state.params.layers, state.velocities.layers, gradients.layers)):
        if g.weights.shape != p.weights.shape or g.biases.shape != p.biases.shape:
            raise ShapeMismatchError(
                f'Trainable layer {idx}: gradient {g.weights.shape}/{g.biases.shape} vs '
                f'parameter {p.weights.shape}/{p.biases.shape}', axis='layers')
        v.weights[...] = alpha * v.weights - beta * lr * p.weights - lr * g.weights
        p.weights += v.weights
        # biases carry no decay term
        v.biases[...] = alpha * v.biases - lr * g.biases
        p.biases += v.biases
    state.updates += 1
    return state


# ============= EPOCH LOOP =============

def batch_slices(n_samples: int, batch_size: int) -> List[slice]:
    '''Contiguous batches; the final short batch is kept'''
    return [slice(start, min(start + batch_size, n_samples)) for start in range(0, n_samples, batch_size)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))


def train_epoch(state: TrainState, spec: NetworkSpec, data: LabeledImages, config: TrainConfig,
                phase: str = 'train') -> TrainState:
    '''One shuffled pass over ``data``; appends an EpochRecord to the history'''
    n = len(data)
    if n == 0:
        raise DatasetError('Cannot train on an empty dataset')
    if data.n_classes != spec.num_classes:
        raise ClassCountMismatchError(
            f'Dataset has {data.n_classes} classes, network outputs {spec.num_classes}')
    missing = data.missing_classes()
    if missing:
        raise DatasetError(f'Training set has no samples of {missing}; MCA is undefined')

    epoch = state.epoch + 1
    rng = epoch_rng(state.seed, epoch)
    order = rng.permutation(n)
    dropout = network.DropoutConfig(config.dropout_ratio)
    lr_used = state.learning_rate

    total_loss = 0.0
    predictions = np.empty(n, dtype=np.int64)
    for batch in batch_slices(n, config.mini_batch_size):
        members = order[batch]
        grad_sum = None
        # fixed summation order: batch order
        for idx in members:
            label = int(data.labels[idx])
            y = network.one_hot(label, spec.num_classes)
            trace = network.forward(state.params, spec, data.images[idx], dropout=dropout, mode='train', rng=rng)
            total_loss += cross_entropy(trace.probabilities, y)
            predictions[idx] = int(np.argmax(trace.probabilities))
            grads = network.backward(trace, state.params, spec, y)
            grad_sum = grads if grad_sum is None else grad_sum.add_(grads)
        update_step(state, grad_sum.scale_(1.0 / len(members)), config)

    if not state.params.all_finite():
        raise ConfigError(f'Parameters diverged at epoch {epoch}; lower the learning rate')

    state.epoch = epoch
    state.history.append(EpochRecord(
        epoch=epoch,
        learning_rate=lr_used,
        train_loss=total_loss / n,
        train_mca=mca_from_labels(data.labels, predictions, spec.num_classes),
        phase=phase,
    ))
    return state


def lr_schedule_step(state: TrainState, config: TrainConfig) -> TrainState:
    '''
    Multiply the learning rate by the reduction factor when the best training
    error rate of the last ``patience`` epochs is not at least
    ``min_improvement`` below the best error before them. Epochs before the
    previous reduction are not inspected.
    '''
    schedule = config.lr_schedule
    if state.reductions >= schedule.max_reductions:
        return state
    errors = [1.0 - r.train_mca for r in state.history[state.last_reduction_index:]]
    if len(errors) < schedule.patience:
        return state

    reference = min(errors[:len(errors) - schedule.patience + 1])
    recent = min(errors[len(errors) - schedule.patience + 1:])
    if reference - recent < schedule.min_improvement:
        old = state.learning_rate
        state.learning_rate = old * schedule.reduction_factor
        state.reductions += 1
        state.last_reduction_index = len(state.history)
        logger.info(f'Training error stalled at {recent:.4f}; learning rate {old:g} -> {state.learning_rate:g} '
                    f'(reduction {state.reductions}/{schedule.max_reductions})')
    return state


# ============= EVALUATION HELPERS =============

def predict_labels(params: NetworkParams, spec: NetworkSpec, images: np.ndarray) -> np.ndarray:
    return np.array([int(np.argmax(network.predict_probabilities(params, spec, img))) for img in images],
                    dtype=np.int64)


def evaluate_mca(params: NetworkParams, spec: NetworkSpec, data: Optional[LabeledImages]) -> Optional[float]:
    '''MCA of a held-out set; None when the set is absent or lacks a class'''
    if data is None or len(data) == 0 or data.missing_classes():
        return None
    return mca_from_labels(data.labels, predict_labels(params, spec, data.images), spec.num_classes)


def evaluate_loss(params: NetworkParams, spec: NetworkSpec, data: LabeledImages) -> float:
    '''Mean eval-mode cross-entropy'''
    if len(data) == 0:
        raise DatasetError('Cannot evaluate the loss of an empty dataset')
    total = 0.0
    for img, label in zip(data.images, data.labels):
        probs = network.predict_probabilities(params, spec, img)
        total += cross_entropy(probs, network.one_hot(int(label), spec.num_classes))
    return total / len(data)


def _check_disjoint(train: LabeledImages, *others: Optional[LabeledImages]):
    '''Compared by source sample, so rotated copies of a held-out sample count as overlap'''
    train_sources = set(train.source_ids)
    for other in others:
        if other is None:
            continue
        shared = sorted(train_sources.intersection(other.source_ids))
        if shared:
            raise DatasetError(f'{len(shared)} samples appear in both training and evaluation sets: {shared[:5]}')


def _check_sets(train: LabeledImages, validation: Optional[LabeledImages], test: Optional[LabeledImages]):
    missing = train.missing_classes()
    if missing:
        raise DatasetError(f'Training set has no samples of {missing}; MCA is undefined')
    for name, data in (('validation', validation), ('test', test)):
        if data is not None and len(data) and data.missing_classes():
            logger.warning(f'{name} set has no samples of {data.missing_classes()}; its MCA curve is left empty')
    _check_disjoint(train, validation, test)


def _run_epochs(state: TrainState, spec: NetworkSpec, train: LabeledImages, config: TrainConfig,
                validation: Optional[LabeledImages], test: Optional[LabeledImages], phase: str,
                track_eval_loss: bool, on_epoch: Optional[EpochCallback]) -> List[Snapshot]:
    snapshots: List[Snapshot] = []
    wanted = set(config.snapshot_epochs)
    for _ in range(config.max_epochs):
        train_epoch(state, spec, train, config, phase=phase)
        record = state.history[-1]
        record.validation_mca = evaluate_mca(state.params, spec, validation)
        record.test_mca = evaluate_mca(state.params, spec, test)
        if track_eval_loss:
            record.eval_loss = evaluate_loss(state.params, spec, train)
        lr_schedule_step(state, config)

        logger.info(f'[{phase}] epoch {record.epoch}/{config.max_epochs} lr={record.learning_rate:g} '
                    f'loss={record.train_loss:.4f} train_mca={record.train_mca:.4f} '
                    f'val_mca={_fmt(record.validation_mca)} test_mca={_fmt(record.test_mca)}')
        if on_epoch:
            on_epoch(record)
        if record.epoch in wanted:
            meta = {'epoch': record.epoch, 'phase': phase, 'seed': state.seed, 'class_names': train.class_names}
            snapshots.append(Snapshot(record.epoch, network.serialize(state.params, spec, meta)))
            logger.info(f'[{phase}] snapshot captured at epoch {record.epoch}')
    return snapshots


def _fmt(value: Optional[float]) -> str:
    return '-' if value is None else f'{value:.4f}'


# ============= FIT / FINETUNE =============

def fit(config: TrainConfig, spec: NetworkSpec, train: LabeledImages, validation: Optional[LabeledImages] = None,
        test: Optional[LabeledImages] = None, params: Optional[NetworkParams] = None,
        on_epoch: Optional[EpochCallback] = None, phase: str = 'train') -> Tuple[TrainState, List[Snapshot]]:
    '''
    Train for ``config.max_epochs`` epochs from a seeded initialization (or
    from ``params``), capturing a snapshot at every epoch in
    ``config.snapshot_epochs``.
    '''
    late = [e for e in config.snapshot_epochs if e > config.max_epochs]
    if late:
        raise ConfigError(f'Snapshot epochs {late} exceed max_epochs={config.max_epochs}')
    _check_sets(train, validation, test)
    seed = config.seed or 0
    if params is None:
        params = network.init_params(spec, seed)
    state = init_state(params, config)
    logger.info(f'[{phase}] fitting {len(train)} samples for {config.max_epochs} epochs, '
                f'batch {config.mini_batch_size}, snapshots at {config.snapshot_epochs}')
    snapshots = _run_epochs(state, spec, train, config, validation, test, phase,
                            track_eval_loss=False, on_epoch=on_epoch)
    return state, snapshots


def finetune(pretrained: Snapshot, train: LabeledImages, config: TrainConfig,
             validation: Optional[LabeledImages] = None, test: Optional[LabeledImages] = None,
             on_epoch: Optional[EpochCallback] = None) -> Tuple[TrainState, List[Snapshot]]:
    '''
    Continue training every layer of a snapshot on a new training set.
    Optimizer velocities restart at zero. An epoch-0 record holds the
    untouched snapshot's eval-mode loss and MCA.
    '''
    model = pretrained.load()
    spec = model.spec
    if train.n_classes != spec.num_classes:
        raise ClassCountMismatchError(
            f'Fine-tuning set has {train.n_classes} classes but the snapshot outputs {spec.num_classes}; '
            f're-head the network with a {train.n_classes}-class output layer first')
    late = [e for e in config.snapshot_epochs if e > config.max_epochs]
    if late:
        raise ConfigError(f'Snapshot epochs {late} exceed max_epochs={config.max_epochs}')
    _check_sets(train, validation, test)

    state = init_state(model.params, config)
    loss0 = evaluate_loss(state.params, spec, train)
    baseline = EpochRecord(
        epoch=0,
        learning_rate=state.learning_rate,
        train_loss=loss0,
        eval_loss=loss0,
        train_mca=evaluate_mca(state.params, spec, train),
        validation_mca=evaluate_mca(state.params, spec, validation),
        test_mca=evaluate_mca(state.params, spec, test),
        phase='finetune',
    )
    state.history.append(baseline)
    state.last_reduction_index = 1
    if on_epoch:
        on_epoch(baseline)
    logger.info(f'[finetune] from epoch-{pretrained.epoch} snapshot, {len(train)} samples, '
                f'{config.max_epochs} epochs, dropout {config.dropout_ratio}')
    snapshots = _run_epochs(state, spec, train, config, validation, test, 'finetune',
                            track_eval_loss=True, on_epoch=on_epoch)
    return state, snapshots


def updates_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)
