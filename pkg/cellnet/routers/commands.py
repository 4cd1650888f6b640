from pydantic import BaseModel, Field
from typing import List, Optional
from cellnet import dataset, network, pipeline_integration, trainer
from cellnet.errors import CellNetError, ConfigError, StepFailedError
from cellnet.inference import Ensemble, variant_rows, write_predictions
from cellnet.models.run_config import AugmentationPlan, RunConfig
from cellnet.training_graph import eval_app, train_app
from cellnet.utils import imageproc
from config.config import load_run_config, run_dir, save_run_config
import glob
import logging
import os
import pandas as pd

logger = logging.getLogger(__name__)

IMAGE_PATTERNS = ("*.png", "*.tif", "*.tiff", "*.bmp", "*.jpg")

# ========== REQUEST MODELS ==========

class ConfigRequest(BaseModel):
    config_path: Optional[str] = None
    overrides: List[str] = Field(default_factory=list, description="key.path=value items")


class SynthRequest(BaseModel):
    out_dir: str
    classes: int = Field(6, ge=1, le=6)
    per_class: int = Field(100, ge=1)
    size: int = Field(78, ge=8)
    seed: int = 0
    orientation_range: float = Field(360.0, ge=0, le=360)
    domain_shift: float = Field(0.0, ge=0, le=1)
    channel_mode: str = "grayscale"


class ProcessRequest(ConfigRequest):
    manifest: Optional[str] = None
    out_dir: str
    angle_step: Optional[float] = None


class TrainRequest(ConfigRequest):
    manifest: Optional[str] = None
    plots: bool = False


class FinetuneRequest(ConfigRequest):
    snapshot: str
    manifest: Optional[str] = None
    compare_scratch: bool = False
    plots: bool = False


class EvalRequest(ConfigRequest):
    models: List[str]
    manifest: Optional[str] = None
    out_dir: str
    plots: bool = False


class PredictRequest(ConfigRequest):
    models: List[str]
    input: str
    out: str


class SweepRequest(ConfigRequest):
    manifest: Optional[str] = None
    angle_steps: List[float] = Field(default_factory=lambda: [360.0, 36.0, 18.0, 9.0])
    with_align: bool = False


class ExportFiltersRequest(BaseModel):
    model: str
    layer: int = Field(1, ge=1, description="1-based convolution index")
    out_dir: str

# ========== HELPERS ==========

def _config(request: ConfigRequest, manifest: Optional[str] = None) -> RunConfig:
    config = load_run_config(request.config_path, request.overrides)
    if manifest:
        config.dataset.manifest_path = os.path.abspath(manifest)
    return config


def _unwrap(result: dict):
    """Data of a successful step result; raises for a failed one"""
    if not result.get("success"):
        raise StepFailedError(result.get("error", "unknown failure"), result.get("error_class", "cellnet_error"))
    return result.get("data")


def _run_graph(app, state: dict) -> dict:
    final = app.invoke(state)
    if final.get("failed"):
        _unwrap(final["failed"])
    return final


def _load_split(config: RunConfig):
    manifest = _unwrap(pipeline_integration.load_dataset(config))
    splits = _unwrap(pipeline_integration.split_dataset(manifest, config))
    return manifest, splits

# ========== COMMANDS ==========

# 1. Synthetic corpus
def synth(request: SynthRequest):
    try:
        logger.info(f"synth called: {request.classes} classes x {request.per_class}, seed {request.seed}")
        manifest = dataset.synth_generate(
            request.out_dir, request.classes, request.per_class, request.size, request.seed,
            request.orientation_range, request.domain_shift, request.channel_mode,
        )
        return {
            "manifest": manifest.source,
            "samples": len(manifest.samples),
            "class_counts": dict(zip(manifest.class_names, manifest.class_counts())),
            "status": "success",
        }
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in synth: {str(e)}")
        raise CellNetError(f"synth failed: {str(e)}")


# 2. Preprocess / augment
def preprocess(request: ProcessRequest, augment: bool = False):
    try:
        config = _config(request, request.manifest)
        if augment and request.angle_step is not None:
            config.augmentation = AugmentationPlan(angle_step_degrees=request.angle_step,
                                                   rotation_stage=config.augmentation.rotation_stage)
        logger.info(f"{'augment' if augment else 'preprocess'} called for {config.dataset.manifest_path}")
        manifest = _unwrap(pipeline_integration.load_dataset(config))
        data = _unwrap(pipeline_integration.prepare_arrays(manifest.samples, manifest.class_names, config,
                                                           augment=augment))
        manifest_path = dataset.save_processed(data, request.out_dir)
        return {
            "manifest": manifest_path,
            "inputs": len(manifest.samples),
            "outputs": len(data),
            "variants_per_image": config.augmentation.variant_count if augment else 1,
            "status": "success",
        }
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in preprocess: {str(e)}")
        raise CellNetError(f"preprocess failed: {str(e)}")


def augment(request: ProcessRequest):
    return preprocess(request, augment=True)


# 3. Train
def train(request: TrainRequest):
    try:
        config = _config(request, request.manifest)
        out = run_dir(config)
        os.makedirs(out, exist_ok=True)
        save_run_config(config, os.path.join(out, "config.json"))
        logger.info(f"train called, run directory {out}")

        final = _run_graph(train_app, {
            "config": config,
            "manifest_path": config.dataset.manifest_path,
            "run_dir": out,
            "plots": request.plots,
        })
        training = final["training"]["data"]
        evaluation = final["evaluation"].get("data") or {}
        return {
            "run_dir": out,
            "snapshots": training["paths"],
            "epochs": training["state"].epoch,
            "test_mca": evaluation.get("mca"),
            "test_aca": evaluation.get("aca"),
            "report": final["report"]["data"]["files"],
            "status": "success",
        }
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in train: {str(e)}")
        raise CellNetError(f"train failed: {str(e)}")


# 4. Fine-tune
def finetune(request: FinetuneRequest):
    try:
        config = _config(request, request.manifest)
        out = os.path.join(run_dir(config), "finetune")
        os.makedirs(out, exist_ok=True)
        save_run_config(config, os.path.join(out, "config.json"))
        logger.info(f"finetune called: {request.snapshot} on {config.dataset.manifest_path}")

        with open(request.snapshot, "rb") as f:
            data = f.read()
        pretrained = trainer.Snapshot(epoch=network.read_model(data).metadata.get("epoch", 0), data=data)

        manifest, splits = _load_split(config)
        train_set = _unwrap(pipeline_integration.prepare_arrays(splits["train"], manifest.class_names, config))
        validation = _unwrap(pipeline_integration.prepare_arrays(splits["validation"], manifest.class_names,
                                                                 config, augment=False))
        test = _unwrap(pipeline_integration.prepare_arrays(splits["test"], manifest.class_names, config,
                                                           augment=False))
        validation = validation if len(validation) else None
        test_or_none = test if len(test) else None

        tuned = _unwrap(pipeline_integration.run_finetune(config, pretrained, train_set, validation, test_or_none,
                                                          snapshot_dir=os.path.join(out, "snapshots")))
        history = list(tuned["state"].history)
        response = {"run_dir": out, "snapshots": tuned["paths"],
                    "finetune_final_loss": history[-1].eval_loss, "finetune_initial_loss": history[0].eval_loss,
                    "finetune_test_mca": history[-1].test_mca}

        if request.compare_scratch:
            scratch_config = config.finetune.to_train_config(config.trainer)
            spec = pretrained.load().spec
            scratch_state, _ = trainer.fit(scratch_config, spec, train_set, validation, test_or_none,
                                           phase="scratch")
            history += scratch_state.history
            response["scratch_test_mca"] = scratch_state.history[-1].test_mca if scratch_state.history else None

        cm, rows = None, None
        if tuned["snapshots"] and test_or_none is not None:
            ensemble = Ensemble.from_snapshots(tuned["snapshots"], manifest.class_names)
            evaluation = _unwrap(pipeline_integration.evaluate_ensemble(ensemble, splits["test"], config))
            cm, rows = evaluation["confusion_matrix"], evaluation["rows"]
            response["test_mca"], response["test_aca"] = evaluation["mca"], evaluation["aca"]
        report = _unwrap(pipeline_integration.write_report(os.path.join(out, "report"), cm, history, rows,
                                                           manifest.class_names, plots=request.plots))
        response["report"] = report["files"]
        response["status"] = "success"
        return response
    except CellNetError:
        raise
    except OSError as e:
        raise ConfigError(f"Cannot read snapshot {request.snapshot}: {e}")
    except Exception as e:
        logger.error(f"Error in finetune: {str(e)}")
        raise CellNetError(f"finetune failed: {str(e)}")


# 5. Evaluate
def evaluate(request: EvalRequest):
    try:
        config = _config(request, request.manifest)
        logger.info(f"eval called with {len(request.models)} models on {config.dataset.manifest_path}")
        final = _run_graph(eval_app, {
            "config": config,
            "manifest_path": config.dataset.manifest_path,
            "model_paths": request.models,
            "out_dir": request.out_dir,
            "plots": request.plots,
        })
        evaluation = final["evaluation"]["data"]
        return {
            "mca": evaluation["mca"],
            "aca": evaluation["aca"],
            "members": evaluation["members"],
            "rotations": evaluation["rotations"],
            "report": final["report"]["data"]["files"],
            "status": "success",
        }
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in evaluate: {str(e)}")
        raise CellNetError(f"eval failed: {str(e)}")


# 6. Predict (unlabeled input)
def _unlabeled_inputs(path: str):
    if os.path.isdir(path):
        files = sorted(f for pattern in IMAGE_PATTERNS for f in glob.glob(os.path.join(path, pattern)))
        return [(os.path.splitext(os.path.basename(f))[0], f, None) for f in files]
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if "id" not in frame.columns or "image" not in frame.columns:
        raise ConfigError(f"Prediction list {path} needs id and image columns")
    base = os.path.dirname(os.path.abspath(path))
    has_mask = "mask" in frame.columns
    return [(row["id"], os.path.join(base, row["image"]),
             os.path.join(base, row["mask"]) if has_mask and row["mask"] else None)
            for _, row in frame.iterrows()]


def predict(request: PredictRequest):
    try:
        config = _config(request)
        ensemble = Ensemble.from_files(request.models)
        inputs = _unlabeled_inputs(request.input)
        if not inputs:
            raise ConfigError(f"No images found in {request.input}")
        logger.info(f"predict called: {len(inputs)} images, {len(request.models)} models")

        plan = config.inference_plan()
        variant_sets = []
        for _, image_path, mask_path in inputs:
            mask = imageproc.load_mask(mask_path) if config.preprocess.align and mask_path else None
            if config.preprocess.align and mask is None:
                raise ConfigError(f"Alignment is configured but {image_path} has no mask")
            variant_sets.append(imageproc.rotation_variants(imageproc.load_image(image_path), mask,
                                                            config.preprocess.align, config.preprocess.target_size,
                                                            plan, channel_mode=config.dataset.channel_mode))
        rows = variant_rows(ensemble, variant_sets, [i for i, _, _ in inputs])
        path = write_predictions(rows, ensemble.class_names, request.out)
        return {"predictions": path, "images": len(rows), "status": "success"}
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in predict: {str(e)}")
        raise CellNetError(f"predict failed: {str(e)}")


# 7. Augmentation / alignment sweep
def sweep(request: SweepRequest):
    try:
        base = _config(request, request.manifest)
        cells = []
        for align in ([False, True] if request.with_align else [False]):
            for step in request.angle_steps:
                overrides = list(request.overrides) + [
                    f"augmentation.angle_step_degrees={step}",
                    f"preprocess.align={'true' if align else 'false'}",
                ]
                if request.manifest:
                    overrides.append(f"dataset.manifest_path={os.path.abspath(request.manifest)}")
                cell = train(TrainRequest(config_path=request.config_path, overrides=overrides))
                cells.append({
                    "angle_step_degrees": step,
                    "rotations": round(360.0 / step),
                    "align": align,
                    "mca": cell["test_mca"],
                    "aca": cell["test_aca"],
                    "run_dir": cell["run_dir"],
                })
                logger.info(f"sweep cell step={step} align={align}: MCA {cell['test_mca']}")

        out = os.path.join(base.runs_dir, f"sweep-{base.config_hash()}-s{base.seed}")
        os.makedirs(out, exist_ok=True)
        summary_path = os.path.join(out, "sweep_summary.csv")
        pd.DataFrame(cells).to_csv(summary_path, index=False, float_format="%.6f", lineterminator="\n")
        return {"summary": summary_path, "cells": cells, "status": "success"}
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in sweep: {str(e)}")
        raise CellNetError(f"sweep failed: {str(e)}")


# 8. Filter export
def export_filters(request: ExportFiltersRequest):
    try:
        model = network.load_model(request.model)
        paths = network.export_filters(model.params, model.spec, request.layer, request.out_dir)
        return {"files": paths, "status": "success"}
    except CellNetError:
        raise
    except Exception as e:
        logger.error(f"Error in export_filters: {str(e)}")
        raise CellNetError(f"export-filters failed: {str(e)}")
