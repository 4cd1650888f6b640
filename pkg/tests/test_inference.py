import numpy as np
import pandas as pd
import pytest

from cellnet import dataset, inference, network
from cellnet.errors import ClassCountMismatchError, ConfigError, ShapeMismatchError, SpecError
from cellnet.models.records import CellSample
from cellnet.models.run_config import AugmentationPlan, LayerSpec, NetworkSpec, PreprocessConfig
from cellnet.utils import imageproc

NAMES = ["top", "bottom", "left"]


def make_ensemble(spec, seeds=(1, 2)):
    return inference.Ensemble([(network.init_params(spec, s), spec) for s in seeds], NAMES)


def brute_force(ensemble, image, step):
    outputs = []
    for params, spec in ensemble.members:
        for k in range(round(360 / step)):
            rotated = imageproc.rotate_about_center(image, k * step)
            outputs.append(network.forward(params, spec, rotated).probabilities)
    return np.mean(outputs, axis=0)


def test_matches_brute_force_average(reduced_spec, rng):
    ensemble = make_ensemble(reduced_spec)
    plan = AugmentationPlan(angle_step_degrees=90)
    for _ in range(100):
        image = rng.random((18, 18))
        label, probs = inference.ensemble_predict(ensemble, image, plan)
        expected = brute_force(ensemble, image, 90)
        assert np.max(np.abs(probs - expected)) < 1e-12
        assert label == int(np.argmax(expected))


def test_single_member_without_rotation_is_plain_prediction(reduced_spec, rng):
    ensemble = make_ensemble(reduced_spec, seeds=(3,))
    params = ensemble.members[0][0]
    image = rng.random((18, 18))
    probs = inference.ensemble_probabilities(ensemble, image, AugmentationPlan())
    assert np.array_equal(probs, inference.predict_single(params, reduced_spec, image))


def test_member_order_does_not_matter(reduced_spec, rng):
    forward = make_ensemble(reduced_spec, seeds=(1, 2, 3))
    backward = inference.Ensemble(list(reversed(forward.members)), NAMES)
    plan = AugmentationPlan(angle_step_degrees=120)
    image = rng.random((18, 18))
    a = inference.ensemble_probabilities(forward, image, plan)
    b = inference.ensemble_probabilities(backward, image, plan)
    assert np.max(np.abs(a - b)) < 1e-12


def test_probabilities_form_a_distribution(reduced_spec, rng):
    ensemble = make_ensemble(reduced_spec)
    probs = inference.ensemble_probabilities(ensemble, rng.random((18, 18)), AugmentationPlan(angle_step_degrees=36))
    assert abs(probs.sum() - 1.0) < 1e-9 and (probs >= 0).all()


def test_members_must_share_an_architecture(reduced_spec):
    other = reduced_spec.model_copy(update={"layers": reduced_spec.layers[:-2] + [LayerSpec.dense(12), LayerSpec.output(3)]})
    with pytest.raises(SpecError):
        inference.Ensemble([(network.init_params(reduced_spec, 0), reduced_spec),
                            (network.init_params(other, 0), other)], NAMES)
    with pytest.raises(SpecError):
        inference.Ensemble([], NAMES)


def test_class_table_must_match_outputs(reduced_spec):
    with pytest.raises(ClassCountMismatchError):
        inference.Ensemble([(network.init_params(reduced_spec, 0), reduced_spec)], ["a", "b"])


def test_wrong_image_size_is_rejected(reduced_spec, rng):
    with pytest.raises(ShapeMismatchError):
        inference.predict_single(network.init_params(reduced_spec, 0), reduced_spec, rng.random((20, 20)))


def test_ties_go_to_lowest_index():
    spec = NetworkSpec(input_size=2, layers=[LayerSpec.output(3)])
    params = network.init_params(spec, 0).zeros_like()
    ensemble = inference.Ensemble([(params, spec)], NAMES)
    label, probs = inference.ensemble_predict(ensemble, np.ones((2, 2)), AugmentationPlan())
    assert label == 0 and np.allclose(probs, 1 / 3)


def test_from_files_reads_class_names(tmp_path, reduced_spec):
    paths = [network.save_model(str(tmp_path / f"m{s}.cnet"), network.init_params(reduced_spec, s), reduced_spec,
                                {"class_names": ["x", "y", "z"]}) for s in (1, 2)]
    ensemble = inference.Ensemble.from_files(paths)
    assert ensemble.class_names == ["x", "y", "z"] and len(ensemble.members) == 2


def test_evaluate_dataset_counts_every_image(reduced_spec, tiny_data):
    cm, rows = inference.evaluate_dataset(make_ensemble(reduced_spec), tiny_data, AugmentationPlan(angle_step_degrees=180))
    assert cm.total == len(tiny_data) == len(rows)
    assert cm.counts.sum(axis=1).tolist() == [8, 8, 8]
    assert rows[0].image_id == tiny_data.ids[0] and rows[0].true_label == "top"
    assert [r.predicted_label for r in rows] == [NAMES[int(np.argmax(r.probabilities))] for r in rows]


def test_write_predictions_columns(tmp_path, reduced_spec, tiny_data):
    _, rows = inference.evaluate_dataset(make_ensemble(reduced_spec), tiny_data, AugmentationPlan())
    path = inference.write_predictions(rows, NAMES, str(tmp_path / "out" / "predictions.csv"))
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["image_id", "predicted_label", "p_top", "p_bottom", "p_left", "true_label"]
    assert len(frame) == 24
    assert np.allclose(frame[["p_top", "p_bottom", "p_left"]].sum(axis=1), 1.0, atol=1e-8)


def test_unlabeled_rows_have_no_truth_column(reduced_spec, tiny_data):
    plan = AugmentationPlan(angle_step_degrees=90)
    rows = inference.variant_rows(make_ensemble(reduced_spec), [imageproc.augment(img, plan) for img in tiny_data.images[:3]],
                                  tiny_data.ids[:3])
    frame = inference.predictions_frame(rows, NAMES)
    assert "true_label" not in frame.columns and len(frame) == 3


# ============= SOURCE-IMAGE ROTATION =============

def write_wide_samples(tmp_path, count=3):
    """30x60 sources, so rotating before resizing differs from rotating after"""
    gen = np.random.default_rng(5)
    samples = []
    for k in range(count):
        path = str(tmp_path / f"w{k}.png")
        imageproc.save_image(path, gen.random((30, 60)))
        samples.append(CellSample(id=f"w{k}", image_path=path, label=k % 3, label_name=NAMES[k % 3]))
    return samples


def test_evaluation_rotates_like_training_before_resize(tmp_path, reduced_spec):
    samples = write_wide_samples(tmp_path)
    preprocess = PreprocessConfig(target_size=18)
    plan = AugmentationPlan(angle_step_degrees=90, rotation_stage="pre_resize")
    ensemble = make_ensemble(reduced_spec)

    training = dataset.load_arrays(samples, NAMES, preprocess, plan)
    cm, rows = inference.evaluate_samples(ensemble, samples, preprocess, plan)
    assert cm.total == 3 and [r.image_id for r in rows] == ["w0", "w1", "w2"]
    for k, row in enumerate(rows):
        expected = inference.variant_probabilities(ensemble, training.images[4 * k:4 * k + 4])
        assert np.max(np.abs(np.array(row.probabilities) - expected)) < 1e-12

    resized_first = imageproc.augment(training.images[0], AugmentationPlan(angle_step_degrees=90))
    assert np.max(np.abs(resized_first[1] - training.images[1])) > 1e-3


def test_post_resize_samples_match_in_memory_evaluation(tmp_path, reduced_spec):
    samples = write_wide_samples(tmp_path)
    preprocess = PreprocessConfig(target_size=18)
    plan = AugmentationPlan(angle_step_degrees=90)
    ensemble = make_ensemble(reduced_spec)
    _, from_samples = inference.evaluate_samples(ensemble, samples, preprocess, plan)
    _, from_arrays = inference.evaluate_dataset(ensemble, dataset.load_arrays(samples, NAMES, preprocess), plan)
    for a, b in zip(from_samples, from_arrays):
        assert np.max(np.abs(np.array(a.probabilities) - np.array(b.probabilities))) < 1e-12


def test_in_memory_evaluation_rejects_source_rotation(reduced_spec, tiny_data):
    plan = AugmentationPlan(angle_step_degrees=90, rotation_stage="pre_resize")
    ensemble = make_ensemble(reduced_spec)
    with pytest.raises(ConfigError):
        inference.ensemble_probabilities(ensemble, tiny_data.images[0], plan)
    with pytest.raises(ConfigError):
        inference.evaluate_dataset(ensemble, tiny_data, plan)
