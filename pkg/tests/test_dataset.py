import os

import numpy as np
import pytest

from cellnet import dataset
from cellnet.errors import DatasetError, ManifestError
from cellnet.models.records import CellSample, DatasetManifest
from cellnet.models.run_config import AugmentationPlan, PreprocessConfig, SplitSpec
from cellnet.utils import imageproc


def fake_manifest(per_class=(30, 20, 10)):
    names = ["a", "b", "c"][:len(per_class)]
    samples = [CellSample(id=f"{names[k]}{i}", image_path=f"/nowhere/{names[k]}{i}.png", label=k, label_name=names[k])
               for k, count in enumerate(per_class) for i in range(count)]
    return DatasetManifest(class_names=names, samples=samples)


def write_corpus(tmp_path, rows, header="id,image,mask,label"):
    (tmp_path / "img").mkdir(exist_ok=True)
    for sample_id in {r.split(",")[0] for r in rows}:
        imageproc.save_image(str(tmp_path / "img" / f"{sample_id}.png"), np.random.default_rng(0).random((12, 12)))
    path = tmp_path / "manifest.csv"
    path.write_text("\n".join([header] + rows) + "\n")
    return str(path)


# ============= SPLIT =============

def test_reference_split_sizes():
    assert dataset.split_sizes(13596, SplitSpec()) == (8701, 2175, 2720)


def test_degenerate_split_puts_everything_in_train():
    train, val, test = dataset.split(fake_manifest(), SplitSpec(train=1.0, validation=0.0, test=0.0, seed=0))
    assert (len(train), len(val), len(test)) == (60, 0, 0)


def test_split_is_a_seeded_partition():
    manifest = fake_manifest()
    first = dataset.split(manifest, SplitSpec(seed=7))
    again = dataset.split(manifest, SplitSpec(seed=7))
    other = dataset.split(manifest, SplitSpec(seed=8))
    ids = [[s.id for s in part] for part in first]
    assert ids == [[s.id for s in part] for part in again]
    assert ids != [[s.id for s in part] for part in other]
    flat = sum(ids, [])
    assert len(flat) == len(set(flat)) == 60
    assert [len(part) for part in ids] == [38, 9, 13]


def test_stratified_split_keeps_class_proportions():
    manifest = fake_manifest((50, 25, 25))
    train, val, test = dataset.split(manifest, SplitSpec(seed=3, stratified=True))
    for part, fraction in ((train, 0.64), (val, 0.16), (test, 0.20)):
        counts = np.bincount([s.label for s in part], minlength=3)
        for k, total in enumerate((50, 25, 25)):
            assert abs(counts[k] - total * fraction) <= 1


# ============= MANIFEST =============

def test_load_manifest_resolves_paths_and_labels(tmp_path):
    path = write_corpus(tmp_path, ["s1,img/s1.png,,HOMOGENEOUS", "s2,img/s2.png,,NUCMEMBRANE", "s3,img/s3.png,,Homogeneous"])
    manifest = dataset.load_manifest(path)
    assert manifest.class_names == ["Homogeneous", "Nuclear Membrane"]
    assert [s.label for s in manifest.samples] == [0, 1, 0]
    assert os.path.isabs(manifest.samples[0].image_path) and manifest.samples[0].mask_path is None


def test_fixed_class_table_orders_labels(tmp_path):
    path = write_corpus(tmp_path, ["s1,img/s1.png,,Golgi", "s2,img/s2.png,,Homogeneous"])
    manifest = dataset.load_manifest(path, class_names=["Homogeneous", "Speckled", "Golgi"])
    assert [s.label for s in manifest.samples] == [2, 0]
    with pytest.raises(ManifestError) as exc:
        dataset.load_manifest(path, class_names=["Homogeneous"])
    assert exc.value.ids == ["s1"]


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        dataset.load_manifest(str(tmp_path / "absent.csv"))

    empty = tmp_path / "empty.csv"
    empty.write_text("id,image,mask,label\n")
    with pytest.raises(ManifestError, match="no classes"):
        dataset.load_manifest(str(empty))

    with pytest.raises(ManifestError, match="lacks columns"):
        dataset.load_manifest(write_corpus(tmp_path, ["s1,img/s1.png,Golgi"], header="id,image,label"))


def test_duplicate_ids_are_reported(tmp_path):
    path = write_corpus(tmp_path, ["s1,img/s1.png,,Golgi", "s1,img/s1.png,,Golgi"])
    with pytest.raises(ManifestError) as exc:
        dataset.load_manifest(path)
    assert exc.value.ids == ["s1"]


def test_missing_files_are_reported(tmp_path):
    path = write_corpus(tmp_path, ["s1,img/s1.png,,Golgi"])
    with open(path, "a") as f:
        f.write("s9,img/s9.png,,Golgi\n")
    with pytest.raises(ManifestError) as exc:
        dataset.load_manifest(path)
    assert exc.value.ids == ["s9"]


def test_write_then_load_manifest(tmp_path):
    path = write_corpus(tmp_path, ["s1,img/s1.png,,Golgi", "s2,img/s2.png,,Speckled"])
    manifest = dataset.load_manifest(path)
    copy = dataset.write_manifest(manifest.samples, str(tmp_path / "copy.csv"))
    assert dataset.load_manifest(copy).samples == manifest.samples


# ============= ARRAYS =============

def test_load_arrays_with_rotation_variants(tmp_path):
    manifest = dataset.load_manifest(write_corpus(tmp_path, ["s1,img/s1.png,,Golgi", "s2,img/s2.png,,Speckled"]))
    config = PreprocessConfig(target_size=16)
    plain = dataset.load_arrays(manifest.samples, manifest.class_names, config)
    assert plain.images.shape == (2, 16, 16) and plain.ids == ["s1", "s2"]

    for stage in ("post_resize", "pre_resize"):
        plan = AugmentationPlan(angle_step_degrees=90, rotation_stage=stage)
        augmented = dataset.load_arrays(manifest.samples, manifest.class_names, config, plan)
        assert len(augmented) == 8
        assert augmented.ids[:4] == ["s1_r0", "s1_r90", "s1_r180", "s1_r270"]
        assert np.array_equal(augmented.images[0], plain.images[0])


def test_alignment_needs_masks(tmp_path):
    manifest = dataset.load_manifest(write_corpus(tmp_path, ["s1,img/s1.png,,Golgi"]))
    with pytest.raises(DatasetError):
        dataset.load_arrays(manifest.samples, manifest.class_names, PreprocessConfig(align=True))


def test_augment_labeled_multiplies_samples(tiny_data):
    out = dataset.augment_labeled(tiny_data, AugmentationPlan(angle_step_degrees=36))
    assert len(out) == 10 * len(tiny_data)
    assert out.labels.tolist()[:10] == [0] * 10
    assert dataset.augment_labeled(tiny_data, AugmentationPlan()) is tiny_data


def test_rotated_copies_keep_their_source_id(tmp_path, tiny_data):
    out = dataset.augment_labeled(tiny_data, AugmentationPlan(angle_step_degrees=180))
    assert out.ids[:2] == ["t0_0_r0", "t0_0_r180"]
    assert out.source_ids[:2] == ["t0_0", "t0_0"]
    assert out.subset([1]).source_ids == ["t0_0"]
    manifest = dataset.load_manifest(write_corpus(tmp_path, ["s1,img/s1.png,,Golgi"]))
    loaded = dataset.load_arrays(manifest.samples, manifest.class_names, PreprocessConfig(target_size=16),
                                 AugmentationPlan(angle_step_degrees=90, rotation_stage="pre_resize"))
    assert loaded.source_ids == ["s1"] * 4
    assert tiny_data.source_ids == tiny_data.ids


def test_save_processed_round_trip(tmp_path, tiny_data):
    path = dataset.save_processed(tiny_data.subset([0, 9]), str(tmp_path / "processed"))
    manifest = dataset.load_manifest(path)
    assert [s.id for s in manifest.samples] == [tiny_data.ids[0], tiny_data.ids[9]]
    assert manifest.class_names == ["top", "bottom"]


# ============= SYNTHETIC CORPUS =============

def test_synthetic_corpus_is_deterministic_and_balanced():
    a, masks = dataset.synth_images(per_class=3, size=32, seed=5)
    b, _ = dataset.synth_images(per_class=3, size=32, seed=5)
    c, _ = dataset.synth_images(per_class=3, size=32, seed=6)
    assert np.array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)
    assert dataset.class_balance(a) == {name: 3 for name in a.class_names}
    assert len(masks) == 18 and masks[0].dtype == bool
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0


def test_synthetic_class_limits():
    with pytest.raises(DatasetError):
        dataset.synth_images(n_classes=7)
    with pytest.raises(DatasetError):
        dataset.synth_images(n_classes=2, class_names=["only"])


def test_synth_generate_writes_loadable_corpus(tmp_path):
    manifest = dataset.synth_generate(str(tmp_path / "corpus"), n_classes=3, per_class=2, size=24, seed=1)
    loaded = dataset.load_manifest(manifest.source)
    assert loaded.class_names == ["Homogeneous", "Speckled", "Nucleolar"]
    assert len(loaded.samples) == 6 and all(s.mask_path for s in loaded.samples)
    data = dataset.load_arrays(loaded.samples, loaded.class_names, PreprocessConfig(target_size=20, align=True))
    assert data.images.shape == (6, 20, 20)


def test_green_channel_corpus(tmp_path):
    manifest = dataset.synth_generate(str(tmp_path / "rgb"), n_classes=2, per_class=1, size=16, channel_mode="green")
    pixels = imageproc.load_image(manifest.samples[0].image_path)
    assert pixels.shape == (16, 16, 3)
