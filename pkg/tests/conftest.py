import numpy as np
import pytest

from pcrobust.backbones import Classifier, make_spec
from pcrobust.meshdata import synth_dataset
from pcrobust.training import TrainConfig, train


@pytest.fixture(scope="session")
def small_data():
    """4 classes x 20 train / 8 val, 64 points: fast substrate for attack tests."""
    train_ds = synth_dataset(4, 20, 64, np.random.default_rng([11, 0]), split="train")
    val_ds = synth_dataset(4, 8, 64, np.random.default_rng([11, 1]), split="val")
    return train_ds, val_ds


@pytest.fixture(scope="session")
def small_model(small_data):
    """A standard-trained PointNet+MAX on the small dataset."""
    train_ds, _ = small_data
    spec = make_spec("pointnet", "max", n_classes=4, n_train=64)
    cfg = TrainConfig(epochs=15, batch_size=16, seed=5)
    params, _, _ = train(spec, train_ds, cfg)
    return Classifier(spec, params)


@pytest.fixture(scope="session")
def small_grouped_model(small_data):
    """A trained grouped (gather-vector) model on the small dataset."""
    train_ds, _ = small_data
    spec = make_spec("grouped", "max", n_classes=4, n_train=64,
                     n_centroids=32, ball_cap=16, ball_radius=0.4)
    cfg = TrainConfig(epochs=15, batch_size=16, seed=5)
    params, _, _ = train(spec, train_ds, cfg)
    return Classifier(spec, params)
