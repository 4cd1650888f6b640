from cellnet import dataset, inference, metrics, trainer
from cellnet.errors import CellNetError
from cellnet.models.run_config import RunConfig
import logging
import os


logger = logging.getLogger(__name__)


def _failure(step: str, e: Exception):
    if isinstance(e, CellNetError):
        logger.error(f"{step} failed [{e.error_class}]: {e.detail}")
        return {"success": False, "error": e.detail, "error_class": e.error_class}
    logger.exception(f"Unexpected error in {step}: {e}")
    return {"success": False, "error": str(e), "error_class": "internal_error"}


def load_dataset(config: RunConfig, manifest_path: str = None):
    """Load and validate the manifest named by the run config (or an explicit path)"""
    try:
        path = manifest_path or config.dataset.manifest_path
        if not path:
            return {"success": False, "error": "No manifest path configured", "error_class": "config_error"}
        logger.info(f"Loading manifest {path}")
        manifest = dataset.load_manifest(path, config.dataset.class_names, config.dataset.channel_mode)
        return {"success": True, "data": manifest}
    except Exception as e:
        return _failure("load_dataset", e)


def split_dataset(manifest, config: RunConfig):
    """Partition the manifest into train / validation / test sample lists"""
    try:
        train, validation, test = dataset.split(manifest, config.split)
        if not train:
            return {"success": False, "error": "Training split is empty", "error_class": "dataset_error"}
        return {"success": True, "data": {"train": train, "validation": validation, "test": test}}
    except Exception as e:
        return _failure("split_dataset", e)


def prepare_arrays(samples, class_names, config: RunConfig, augment: bool = True):
    """
    Preprocess a list of samples into a LabeledImages set.

    Args:
        samples: CellSample list
        class_names: class table of the manifest
        config: run configuration (preprocess, augmentation, channel mode)
        augment: expand every sample into its rotated variants (training sets only)
    """
    try:
        plan = config.augmentation if augment else None
        data = dataset.load_arrays(samples, class_names, config.preprocess, plan, config.dataset.channel_mode)
        logger.info(f"Prepared {len(data)} images from {len(samples)} samples (augment={augment})")
        return {"success": True, "data": data}
    except Exception as e:
        return _failure("prepare_arrays", e)


def run_training(config: RunConfig, train, validation=None, test=None, snapshot_dir: str = None,
                 on_epoch=None):
    """Fit the configured network and write every captured snapshot under snapshot_dir"""
    try:
        state, snapshots = trainer.fit(config.trainer, config.network, train, validation, test, on_epoch=on_epoch)
        paths = []
        if snapshot_dir:
            os.makedirs(snapshot_dir, exist_ok=True)
            paths = [s.save(os.path.join(snapshot_dir, f"epoch_{s.epoch:03d}.cnet")) for s in snapshots]
        return {"success": True, "data": {"state": state, "snapshots": snapshots, "paths": paths}}
    except Exception as e:
        return _failure("run_training", e)


def run_finetune(config: RunConfig, snapshot, train, validation=None, test=None, snapshot_dir: str = None,
                 on_epoch=None):
    """Fine-tune a pretrained snapshot with the run's finetune settings"""
    try:
        ft_config = config.finetune.to_train_config(config.trainer)
        state, snapshots = trainer.finetune(snapshot, train, ft_config, validation, test, on_epoch=on_epoch)
        paths = []
        if snapshot_dir:
            os.makedirs(snapshot_dir, exist_ok=True)
            paths = [s.save(os.path.join(snapshot_dir, f"finetune_epoch_{s.epoch:03d}.cnet")) for s in snapshots]
        return {"success": True, "data": {"state": state, "snapshots": snapshots, "paths": paths}}
    except Exception as e:
        return _failure("run_finetune", e)


def evaluate_ensemble(ensemble, samples, config: RunConfig):
    """Snapshot-ensemble, rotation-averaged evaluation of labeled manifest samples"""
    try:
        if len(samples) == 0:
            return {"success": False, "error": "Evaluation set is empty", "error_class": "dataset_error"}
        plan = config.inference_plan()
        cm, rows = inference.evaluate_samples(ensemble, samples, config.preprocess, plan,
                                              config.dataset.channel_mode)
        analysis = {
            "confusion_matrix": cm,
            "rows": rows,
            "mca": metrics.mca(cm),
            "aca": metrics.aca(cm),
            "members": len(ensemble.members),
            "rotations": plan.variant_count,
        }
        logger.info(f"Ensemble MCA {analysis['mca']:.4f}, ACA {analysis['aca']:.4f} "
                    f"({analysis['members']} members x {analysis['rotations']} rotations)")
        return {"success": True, "data": analysis}
    except Exception as e:
        return _failure("evaluate_ensemble", e)


def write_report(out_dir: str, cm=None, history=None, rows=None, class_names=None, plots: bool = False):
    """Write confusion matrix, learning curve, summary and optional per-image predictions"""
    try:
        written = metrics.export_report(cm, history or [], out_dir, plots=plots)
        if rows:
            written.append(inference.write_predictions(rows, class_names, os.path.join(out_dir, "predictions.csv")))
        return {"success": True, "data": {"files": written}}
    except Exception as e:
        return _failure("write_report", e)
