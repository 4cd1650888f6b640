from cellnet.models.run_config import (
    LayerSpec, NetworkSpec, LRScheduleConfig, TrainConfig, FinetuneConfig, SplitSpec,
    AugmentationPlan, PreprocessConfig, DatasetConfig, InferenceConfig, RunConfig,
)
from cellnet.models.records import CellSample, DatasetManifest, EpochRecord, PredictionRow, ErrorResponse
