from cellnet.pipeline_integration import (
    load_dataset, split_dataset, prepare_arrays, run_training, evaluate_ensemble, write_report, _failure,
)
from cellnet.inference import Ensemble
from langgraph.graph import StateGraph, END
from typing import Any, Optional, TypedDict
import os


# Workflow state shared by the train and evaluation graphs
class TrainingState(TypedDict, total=False):
    config: Any
    manifest_path: Optional[str]
    run_dir: str
    plots: bool
    manifest: dict
    splits: dict
    train_data: dict
    validation_data: dict
    test_data: dict
    training: dict
    evaluation: dict
    report: dict
    failed: Optional[dict]


class EvaluationState(TypedDict, total=False):
    config: Any
    manifest_path: Optional[str]
    model_paths: list
    out_dir: str
    plots: bool
    ensemble: dict
    manifest: dict
    data: dict
    evaluation: dict
    report: dict
    failed: Optional[dict]


def _continue_or_stop(next_node: str):
    def route(state):
        return END if state.get("failed") else next_node
    return route


def _checked(result: dict, key: str):
    """State update for a step result; a failed step is also recorded under 'failed'"""
    update = {key: result}
    if not result.get("success"):
        update["failed"] = result
    return update


# ============= TRAIN WORKFLOW =============

def load_node(state: TrainingState):
    """Load the manifest"""
    return _checked(load_dataset(state["config"], state.get("manifest_path")), "manifest")


def split_node(state: TrainingState):
    """Train / validation / test partition"""
    return _checked(split_dataset(state["manifest"]["data"], state["config"]), "splits")


def preprocess_node(state: TrainingState):
    """Preprocess all three splits; only the training split is augmented"""
    config = state["config"]
    splits = state["splits"]["data"]
    class_names = state["manifest"]["data"].class_names
    update = {}
    for key, name, augment in (("train_data", "train", True), ("validation_data", "validation", False),
                               ("test_data", "test", False)):
        result = prepare_arrays(splits[name], class_names, config, augment=augment)
        update.update(_checked(result, key))
        if not result["success"]:
            break
    return update


def fit_node(state: TrainingState):
    """Train and capture snapshots"""
    result = run_training(
        state["config"],
        state["train_data"]["data"],
        state["validation_data"]["data"] if len(state["validation_data"]["data"]) else None,
        state["test_data"]["data"] if len(state["test_data"]["data"]) else None,
        snapshot_dir=os.path.join(state["run_dir"], "snapshots"),
    )
    return _checked(result, "training")


def evaluate_node(state: TrainingState):
    """Ensemble of all captured snapshots on the test split"""
    snapshots = state["training"]["data"]["snapshots"]
    test_samples = state["splits"]["data"]["test"]
    if not snapshots or not test_samples:
        return {"evaluation": {"success": True, "data": None}}
    try:
        ensemble = Ensemble.from_snapshots(snapshots, state["manifest"]["data"].class_names)
    except Exception as e:
        return _checked(_failure("load_ensemble", e), "evaluation")
    return _checked(evaluate_ensemble(ensemble, test_samples, state["config"]), "evaluation")


def report_node(state: TrainingState):
    """Learning curve, confusion matrix and summary under <run_dir>/report"""
    evaluation = state["evaluation"].get("data") or {}
    result = write_report(
        os.path.join(state["run_dir"], "report"),
        cm=evaluation.get("confusion_matrix"),
        history=state["training"]["data"]["state"].history,
        rows=evaluation.get("rows"),
        class_names=state["manifest"]["data"].class_names,
        plots=state.get("plots", False),
    )
    return _checked(result, "report")


train_graph = StateGraph(TrainingState)

train_graph.add_node("load", load_node)
train_graph.add_node("split", split_node)
train_graph.add_node("preprocess", preprocess_node)
train_graph.add_node("fit", fit_node)
train_graph.add_node("evaluate", evaluate_node)
train_graph.add_node("write_report", report_node)

train_graph.set_entry_point("load")
train_graph.add_conditional_edges("load", _continue_or_stop("split"))
train_graph.add_conditional_edges("split", _continue_or_stop("preprocess"))
train_graph.add_conditional_edges("preprocess", _continue_or_stop("fit"))
train_graph.add_conditional_edges("fit", _continue_or_stop("evaluate"))
train_graph.add_conditional_edges("evaluate", _continue_or_stop("write_report"))
train_graph.add_edge("write_report", END)

train_app = train_graph.compile()


# ============= EVALUATION WORKFLOW =============

def ensemble_node(state: EvaluationState):
    """Load the snapshot files as one ensemble"""
    try:
        ensemble = Ensemble.from_files(state["model_paths"])
        return {"ensemble": {"success": True, "data": ensemble}}
    except Exception as e:
        return _checked(_failure("load_ensemble", e), "ensemble")


def eval_load_node(state: EvaluationState):
    """Load the labeled evaluation manifest"""
    return _checked(load_dataset(state["config"], state.get("manifest_path")), "manifest")


def eval_preprocess_node(state: EvaluationState):
    """Map sample labels onto the ensemble's class table; images are read per sample at prediction time"""
    manifest = state["manifest"]["data"]
    ensemble = state["ensemble"]["data"]
    index = {name: k for k, name in enumerate(ensemble.class_names)}
    missing = sorted({s.label_name for s in manifest.samples} - set(index))
    if missing:
        return _checked({"success": False, "error": f"Classes {missing} unknown to the ensemble",
                         "error_class": "class_count_mismatch"}, "data")
    samples = [s.model_copy(update={"label": index[s.label_name]}) for s in manifest.samples]
    return {"data": {"success": True, "data": samples}}


def eval_predict_node(state: EvaluationState):
    """Ensemble prediction over the labeled set"""
    return _checked(evaluate_ensemble(state["ensemble"]["data"], state["data"]["data"], state["config"]),
                    "evaluation")


def eval_report_node(state: EvaluationState):
    """Confusion matrix, summary and predictions"""
    evaluation = state["evaluation"]["data"]
    result = write_report(
        state["out_dir"],
        cm=evaluation["confusion_matrix"],
        rows=evaluation["rows"],
        class_names=state["ensemble"]["data"].class_names,
        plots=state.get("plots", False),
    )
    return _checked(result, "report")


eval_graph = StateGraph(EvaluationState)

eval_graph.add_node("load_ensemble", ensemble_node)
eval_graph.add_node("load", eval_load_node)
eval_graph.add_node("preprocess", eval_preprocess_node)
eval_graph.add_node("predict", eval_predict_node)
eval_graph.add_node("write_report", eval_report_node)

eval_graph.set_entry_point("load_ensemble")
eval_graph.add_conditional_edges("load_ensemble", _continue_or_stop("load"))
eval_graph.add_conditional_edges("load", _continue_or_stop("preprocess"))
eval_graph.add_conditional_edges("preprocess", _continue_or_stop("predict"))
eval_graph.add_conditional_edges("predict", _continue_or_stop("write_report"))
eval_graph.add_edge("write_report", END)

eval_app = eval_graph.compile()
