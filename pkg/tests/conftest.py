import numpy as np
import pytest

from segdetect import model, synthdata


@pytest.fixture(scope="session")
def small_dataset():
    cfg = synthdata.DatasetConfig(train_size=40, val_size=50, seed=7)
    train = synthdata.generate_samples(cfg, "train")
    val = synthdata.generate_samples(cfg, "val")
    return cfg, train, val


@pytest.fixture(scope="session")
def small_model(small_dataset):
    """Quickly trained toy model shared by attack/feature tests."""
    _, train, _ = small_dataset
    return model.train([(s.image, s.labels) for s in train],
                       model.TrainConfig(epochs=10, seed=7))


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
