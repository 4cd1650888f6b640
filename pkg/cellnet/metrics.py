'''
Confusion matrix, mean class accuracy (MCA), average classification
accuracy (ACA) and the delimited-text report files.

Report column orders:
  confusion_matrix.csv       true_class, <one column per predicted class>   (row-normalized %, 2 dp)
  confusion_counts.csv       true_class, <one column per predicted class>   (raw counts)
  learning_curve.csv         epoch, phase, learning_rate, train_loss, eval_loss, train_mca, validation_mca, test_mca
  summary.csv                metric, value   (mca, aca, total, then ccr_<class> rows)
'''
from typing import Iterable, List, Optional, Sequence
import logging
import os

import numpy as np
import pandas as pd

from cellnet.errors import MetricsError
from cellnet.models.records import EpochRecord

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ['epoch', 'phase', 'learning_rate', 'train_loss', 'eval_loss', 'train_mca', 'validation_mca', 'test_mca']


class ConfusionMatrix:
    '''n x n counts, cell (true k, predicted j)'''

    def __init__(self, n_classes: int, class_names: Optional[Sequence[str]] = None):
        if n_classes < 1:
            raise MetricsError('Confusion matrix needs at least one class')
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        self.class_names = list(class_names) if class_names else [str(k) for k in range(n_classes)]
        if len(self.class_names) != n_classes:
            raise MetricsError(f'{len(self.class_names)} class names for {n_classes} classes')

    @classmethod
    def from_labels(cls, true_labels: Iterable[int], predicted_labels: Iterable[int], n_classes: int,
                    class_names: Optional[Sequence[str]] = None) -> 'ConfusionMatrix':
        cm = cls(n_classes, class_names)
        for t, p in zip(true_labels, predicted_labels):
            cm.accumulate(t, p)
        return cm

    @classmethod
    def from_counts(cls, counts, class_names: Optional[Sequence[str]] = None) -> 'ConfusionMatrix':
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or (counts < 0).any():
            raise MetricsError(f'Counts must be a non-negative square matrix, got shape {counts.shape}')
        cm = cls(counts.shape[0], class_names)
        cm.counts = counts.copy()
        return cm

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, true_label: int, predicted_label: int) -> 'ConfusionMatrix':
        n = self.n_classes
        for name, label in (('true', true_label), ('predicted', predicted_label)):
            if not 0 <= int(label) < n:
                raise MetricsError(f'{name} label {label} outside [0, {n})')
        self.counts[int(true_label), int(predicted_label)] += 1
        return self

    def merge(self, other: 'ConfusionMatrix') -> 'ConfusionMatrix':
        if other.n_classes != self.n_classes:
            raise MetricsError(f'Cannot merge {self.n_classes}-class and {other.n_classes}-class matrices')
        return ConfusionMatrix.from_counts(self.counts + other.counts, self.class_names)

    def per_class_ccr(self) -> np.ndarray:
        row_sums = self.counts.sum(axis=1)
        empty = [self.class_names[k] for k in np.flatnonzero(row_sums == 0)]
        if empty:
            raise MetricsError(f'Classes without samples: {empty}')
        return np.diag(self.counts) / row_sums

    def percentages(self) -> np.ndarray:
        row_sums = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid='ignore', divide='ignore'):
            pct = np.where(row_sums > 0, 100.0 * self.counts / np.maximum(row_sums, 1), 0.0)
        return pct


def mca(cm: ConfusionMatrix) -> float:
    '''Mean of the per-class correct classification rates'''
    return float(np.mean(cm.per_class_ccr()))


def aca(cm: ConfusionMatrix) -> float:
    '''Overall fraction of correctly classified samples'''
    if cm.total == 0:
        raise MetricsError('ACA of an empty confusion matrix')
    return float(np.trace(cm.counts) / cm.total)


def mca_from_labels(true_labels, predicted_labels, n_classes: int) -> float:
    '''MCA of paired label vectors; every class must have at least one true sample'''
    return mca(ConfusionMatrix.from_labels(true_labels, predicted_labels, n_classes))


# ============= REPORTS =============

def curve_frame(history: Sequence[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in history], columns=CURVE_COLUMNS)


def summary_frame(cm: ConfusionMatrix) -> pd.DataFrame:
    ccr = cm.per_class_ccr()
    rows = [('mca', mca(cm)), ('aca', aca(cm)), ('total', float(cm.total))]
    rows += [(f'ccr_{name}', float(rate)) for name, rate in zip(cm.class_names, ccr)]
    return pd.DataFrame(rows, columns=['metric', 'value'])


def export_report(cm: Optional[ConfusionMatrix], history: Sequence[EpochRecord], out_dir: str,
                  plots: bool = False) -> List[str]:
    '''Write the percentage confusion matrix, curve table and summary; optional plotly HTML'''
    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        if cm is not None:
            pct = pd.DataFrame(np.round(cm.percentages(), 2), index=cm.class_names, columns=cm.class_names)
            pct.index.name = 'true_class'
            written.append(_write_csv(pct, os.path.join(out_dir, 'confusion_matrix.csv'), index=True))
            counts = pd.DataFrame(cm.counts, index=cm.class_names, columns=cm.class_names)
            counts.index.name = 'true_class'
            written.append(_write_csv(counts, os.path.join(out_dir, 'confusion_counts.csv'), index=True))
            # full precision: the summary is the single source of truth for MCA
            written.append(_write_csv(summary_frame(cm), os.path.join(out_dir, 'summary.csv'),
                                      float_format='%.17g'))
        if history:
            written.append(_write_csv(curve_frame(history), os.path.join(out_dir, 'learning_curve.csv')))
        if plots:
            from cellnet.utils.charts import confusion_heatmap, learning_curve_chart
            if history:
                path = os.path.join(out_dir, 'learning_curve.html')
                learning_curve_chart(history).write_html(path, include_plotlyjs='cdn')
                written.append(path)
            if cm is not None:
                path = os.path.join(out_dir, 'confusion_matrix.html')
                confusion_heatmap(cm).write_html(path, include_plotlyjs='cdn')
                written.append(path)
    except OSError as e:
        raise MetricsError(f'Failed writing report to {out_dir}: {e}')
    logger.info(f'Report written to {out_dir} ({len(written)} files)')
    return written


def _write_csv(frame: pd.DataFrame, path: str, index: bool = False, float_format: Optional[str] = None) -> str:
    try:
        frame.to_csv(path, index=index, float_format=float_format, lineterminator='\n')
    except OSError as e:
        raise MetricsError(f'Cannot write {path}: {e}')
    return path


def read_summary(path: str) -> dict:
    frame = pd.read_csv(path, float_precision='round_trip')
    return dict(zip(frame['metric'], frame['value']))
