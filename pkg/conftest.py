import numpy as np
import pytest

from cellnet.dataset import LabeledImages
from cellnet.models.run_config import LayerSpec, NetworkSpec


@pytest.fixture
def reduced_spec():
    """18x18 input, maps 2/3/4, F=10, n=3: 18 -> 16 -> 8 -> 6 -> 3 -> 2 -> 1"""
    return NetworkSpec(
        input_size=18,
        layers=[
            LayerSpec.conv(3, 2), LayerSpec.pool(2),
            LayerSpec.conv(3, 3), LayerSpec.pool(2),
            LayerSpec.conv(2, 4), LayerSpec.pool(2),
            LayerSpec.dense(10), LayerSpec.output(3),
        ],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_tiny_data(n_per_class=8, size=18, seed=0, id_prefix="t"):
    """Three easily separable classes: bright top half, bright bottom half, bright left half"""
    gen = np.random.default_rng(seed)
    images, labels, ids = [], [], []
    half = size // 2
    for label in range(3):
        for k in range(n_per_class):
            img = 0.1 * gen.random((size, size))
            if label == 0:
                img[:half] += 0.8
            elif label == 1:
                img[half:] += 0.8
            else:
                img[:, :half] += 0.8
            images.append(img)
            labels.append(label)
            ids.append(f"{id_prefix}{label}_{k}")
    return LabeledImages(np.stack(images), np.array(labels), ["top", "bottom", "left"], ids)


@pytest.fixture
def tiny_data():
    return make_tiny_data()
