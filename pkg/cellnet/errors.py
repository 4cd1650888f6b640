'''
Structured errors raised by the cellnet engine.

Every error carries a machine-readable ``error_class`` (used by the CLI for its
one-line error output) and a human readable ``detail``.
'''
from typing import Optional


class CellNetError(Exception):
    '''Base error for all cellnet failures'''
    error_class = 'cellnet_error'

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ShapeMismatchError(CellNetError):
    '''Two arrays disagree along a named axis'''
    error_class = 'shape_mismatch'

    def __init__(self, detail: str, axis: Optional[str] = None):
        super().__init__(detail)
        self.axis = axis


class SpecError(CellNetError):
    '''Network architecture description is inconsistent'''
    error_class = 'spec_error'

    def __init__(self, detail: str, layer: Optional[int] = None):
        super().__init__(detail)
        self.layer = layer


class ConfigError(CellNetError):
    error_class = 'config_error'


class ManifestError(CellNetError):
    '''Dataset manifest could not be loaded or validated'''
    error_class = 'manifest_error'

    def __init__(self, detail: str, ids: Optional[list] = None):
        super().__init__(detail)
        self.ids = ids or []


class ModelFormatError(CellNetError):
    '''Serialized model stream is corrupt, truncated or of an unknown version'''
    error_class = 'model_format_error'


class PreprocessError(CellNetError):
    error_class = 'preprocess_error'


class MetricsError(CellNetError):
    error_class = 'metrics_error'


class ClassCountMismatchError(CellNetError):
    '''Dataset class count differs from the network output size'''
    error_class = 'class_count_mismatch'


class DegenerateInputWarning(UserWarning):
    '''Input was degenerate (constant image, isotropic mask) and a fallback was applied'''


class DatasetError(CellNetError):
    '''Training or evaluation data is empty, overlapping or inconsistent'''
    error_class = 'dataset_error'


class StepFailedError(CellNetError):
    '''A pipeline step reported failure; carries the step's own error class'''

    def __init__(self, detail: str, error_class: str = 'cellnet_error'):
        super().__init__(detail)
        self.error_class = error_class
