from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Literal


class CellSample(BaseModel):
    '''One pre-segmented cell: image, optional mask, class label'''
    id: str = Field(..., description='Unique sample id')
    image_path: str
    mask_path: Optional[str] = None
    label: int = Field(..., ge=0, description='Index into the manifest class table')
    label_name: str
    specimen_id: Optional[str] = None

    @field_validator('id')
    def id_not_empty(cls, v):
        if not v or len(v.strip()) == 0:
            raise ValueError('Sample id cannot be empty')
        return v.strip()


class DatasetManifest(BaseModel):
    '''Class table plus sample records of a cell-image corpus'''
    class_names: List[str]
    samples: List[CellSample]
    channel_mode: Literal['grayscale', 'green'] = 'grayscale'
    source: Optional[str] = Field(None, description='Manifest file the records came from')

    @model_validator(mode='after')
    def labels_in_table(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError('Class names must be unique')
        n = len(self.class_names)
        bad = [s.id for s in self.samples if s.label >= n]
        if bad:
            raise ValueError(f'Labels outside the class table for samples: {bad[:10]}')
        return self

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_counts(self) -> List[int]:
        counts = [0] * self.num_classes
        for sample in self.samples:
            counts[sample.label] += 1
        return counts


class EpochRecord(BaseModel):
    '''One learning-curve row'''
    epoch: int
    learning_rate: float
    train_loss: float
    train_mca: float
    eval_loss: Optional[float] = Field(None, description="Eval-mode loss on the training set")
    validation_mca: Optional[float] = None
    test_mca: Optional[float] = None
    phase: Literal['train', 'finetune', 'scratch'] = 'train'


class PredictionRow(BaseModel):
    image_id: str
    predicted_label: str
    probabilities: List[float]
    true_label: Optional[str] = None


class ErrorResponse(BaseModel):
    '''Standard error line printed by the CLI'''
    error: str
    detail: Optional[str] = None
    status: str = 'error'
