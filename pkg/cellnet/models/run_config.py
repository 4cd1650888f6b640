from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Literal
import hashlib
import json

from cellnet.utils.class_map import class_table


LayerKind = Literal['convolution', 'maxpool', 'fully_connected', 'softmax_output']
TRAINABLE_KINDS = ('convolution', 'fully_connected', 'softmax_output')


class LayerSpec(BaseModel):
    '''One stage of the network: C(k, maps), P(r), F(neurons) or OUT(classes)'''
    kind: LayerKind = Field(..., description='Layer type')
    filter_size: Optional[int] = Field(None, description='Convolution filter side k')
    output_maps: Optional[int] = Field(None, description='Convolution output map count')
    region: Optional[int] = Field(None, description='Max-pooling region side r')
    neurons: Optional[int] = Field(None, description='Fully-connected unit count')
    classes: Optional[int] = Field(None, description='Softmax output class count')

    @model_validator(mode='after')
    def kind_fields_present(self):
        required = {
            'convolution': ('filter_size', 'output_maps'),
            'maxpool': ('region',),
            'fully_connected': ('neurons',),
            'softmax_output': ('classes',),
        }[self.kind]
        for name in required:
            value = getattr(self, name)
            if value is None or value < 1:
                raise ValueError(f'{self.kind} layer needs a positive {name}')
        return self

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    @classmethod
    def conv(cls, k: int, maps: int) -> 'LayerSpec':
        return cls(kind='convolution', filter_size=k, output_maps=maps)

    @classmethod
    def pool(cls, r: int) -> 'LayerSpec':
        return cls(kind='maxpool', region=r)

    @classmethod
    def dense(cls, neurons: int) -> 'LayerSpec':
        return cls(kind='fully_connected', neurons=neurons)

    @classmethod
    def output(cls, classes: int) -> 'LayerSpec':
        return cls(kind='softmax_output', classes=classes)


class NetworkSpec(BaseModel):
    '''Architecture description; see reference() for the standard 78x78 network'''
    input_size: int = Field(78, ge=1, description='Square input side in pixels')
    input_channels: int = Field(1, ge=1)
    strict_pooling: bool = Field(True, description='Reject pooling stages that do not divide their input')
    layers: List[LayerSpec]

    @field_validator('layers')
    def layers_ordered(cls, v):
        if not v:
            raise ValueError('Network needs at least one layer')
        if v[-1].kind != 'softmax_output':
            raise ValueError('Last layer must be softmax_output')
        if sum(1 for layer in v if layer.kind == 'softmax_output') != 1:
            raise ValueError('Exactly one softmax_output layer allowed')
        seen_dense = False
        for idx, layer in enumerate(v):
            if layer.kind in ('fully_connected', 'softmax_output'):
                seen_dense = True
            elif seen_dense:
                raise ValueError(f'Layer {idx} ({layer.kind}) follows a fully-connected layer')
        return v

    @property
    def num_classes(self) -> int:
        return self.layers[-1].classes

    @classmethod
    def reference(cls, n_classes: int = 6) -> 'NetworkSpec':
        '''C(7,6) P(2) C(4,16) P(3) C(3,32) P(3) F(150) OUT(n) on 78x78 inputs'''
        return cls(
            input_size=78,
            layers=[
                LayerSpec.conv(7, 6), LayerSpec.pool(2),
                LayerSpec.conv(4, 16), LayerSpec.pool(3),
                LayerSpec.conv(3, 32), LayerSpec.pool(3),
                LayerSpec.dense(150), LayerSpec.output(n_classes),
            ],
        )


class LRScheduleConfig(BaseModel):
    '''Plateau rule for learning-rate reduction'''
    reduction_factor: float = Field(0.5, gt=0, le=1)
    patience: int = Field(5, description='Epochs inspected for improvement')
    min_improvement: float = Field(0.001, ge=0, description='Absolute training error-rate improvement')
    max_reductions: int = Field(3, ge=0)

    @field_validator('patience')
    def patience_valid(cls, v):
        if v < 2:
            raise ValueError('Schedule patience must be at least 2 epochs')
        return v


class TrainConfig(BaseModel):
    '''Training hyper-parameters; defaults are the reference training setup'''
    initial_learning_rate: float = Field(0.01, ge=0)
    mini_batch_size: int = Field(113, ge=1)
    momentum_coefficient: float = Field(0.9, ge=0, lt=1)
    weight_decay_coefficient: float = Field(0.0005, ge=0)
    dropout_ratio: float = Field(0.0, ge=0, lt=1)
    max_epochs: int = Field(100, ge=0)
    snapshot_epochs: List[int] = Field(default_factory=lambda: [75, 85, 95, 100])
    lr_schedule: LRScheduleConfig = Field(default_factory=LRScheduleConfig)
    seed: Optional[int] = Field(None, description='Falls back to RunConfig.seed')

    @field_validator('snapshot_epochs')
    def snapshots_sorted(cls, v):
        if any(e < 1 for e in v):
            raise ValueError('Snapshot epochs are 1-based')
        return sorted(set(v))

    @model_validator(mode='after')
    def snapshots_within_run(self):
        late = [e for e in self.snapshot_epochs if e > self.max_epochs]
        if late:
            raise ValueError(f'Snapshot epochs {late} exceed max_epochs={self.max_epochs}')
        return self


class FinetuneConfig(BaseModel):
    '''Adaptation of a pretrained snapshot to a second dataset'''
    epochs: int = Field(10, ge=0)
    dropout_ratio: float = Field(0.5, ge=0, lt=1)
    initial_learning_rate: float = Field(0.01, ge=0)

    def to_train_config(self, base: TrainConfig) -> TrainConfig:
        return base.model_copy(update={
            'max_epochs': self.epochs,
            'dropout_ratio': self.dropout_ratio,
            'initial_learning_rate': self.initial_learning_rate,
            'snapshot_epochs': [self.epochs] if self.epochs > 0 else [],
        })


class SplitSpec(BaseModel):
    '''Train/validation/test partition, default 64/16/20'''
    train: float = Field(0.64, ge=0, le=1)
    validation: float = Field(0.16, ge=0, le=1)
    test: float = Field(0.20, ge=0, le=1)
    seed: Optional[int] = None
    stratified: bool = False

    @model_validator(mode='after')
    def fractions_sum_to_one(self):
        total = self.train + self.validation + self.test
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f'Split fractions must sum to 1, got {total}')
        return self


class AugmentationPlan(BaseModel):
    '''Rotation augmentation with step theta; m = 360 / theta variants'''
    angle_step_degrees: float = Field(360.0, gt=0, le=360)
    rotation_stage: Literal['post_resize', 'pre_resize'] = Field(
        'post_resize', description='Rotate the resized image or the normalized source image')

    @field_validator('angle_step_degrees')
    def step_divides_360(cls, v):
        m = round(360.0 / v)
        if m < 1 or abs(m * v - 360.0) > 1e-9:
            raise ValueError(f'Angle step {v} does not divide 360')
        return v

    @property
    def variant_count(self) -> int:
        return round(360.0 / self.angle_step_degrees)

    def angles(self) -> List[float]:
        return [k * self.angle_step_degrees for k in range(self.variant_count)]


class PreprocessConfig(BaseModel):
    target_size: int = Field(78, ge=1)
    align: bool = Field(False, description='PCA pre-alignment using the cell mask')


class DatasetConfig(BaseModel):
    manifest_path: Optional[str] = None
    class_names: Optional[List[str]] = Field(None, description='Fixed class table, or the name of a built-in one')
    channel_mode: Literal['grayscale', 'green'] = 'grayscale'

    @field_validator('class_names', mode='before')
    def named_table(cls, v):
        if isinstance(v, str):
            table = class_table(v)
            if table is None:
                raise ValueError(f'Unknown class table {v!r}')
            return list(table)
        return v


class InferenceConfig(BaseModel):
    angle_step_degrees: Optional[float] = Field(None, description='Overrides the training angle step at test time')


class RunConfig(BaseModel):
    '''The whole experiment document'''
    config_version: int = 1
    seed: int = 0
    runs_dir: Optional[str] = None
    network: NetworkSpec = Field(default_factory=NetworkSpec.reference)
    trainer: TrainConfig = Field(default_factory=TrainConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    split: SplitSpec = Field(default_factory=SplitSpec)
    augmentation: AugmentationPlan = Field(default_factory=AugmentationPlan)
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)

    @field_validator('config_version')
    def version_supported(cls, v):
        if v != 1:
            raise ValueError(f'Unsupported config_version {v}')
        return v

    @model_validator(mode='after')
    def fill_seeds(self):
        if self.trainer.seed is None:
            self.trainer.seed = self.seed
        if self.split.seed is None:
            self.split.seed = self.seed
        return self

    def inference_plan(self) -> AugmentationPlan:
        if self.inference.angle_step_degrees is None:
            return self.augmentation
        return AugmentationPlan(
            angle_step_degrees=self.inference.angle_step_degrees,
            rotation_stage=self.augmentation.rotation_stage,
        )

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode='json', exclude={'runs_dir'}), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:10]
