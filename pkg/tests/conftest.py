"""Shared fixtures: micro-scale configs, parameters and a tiny on-disk dataset."""

import numpy as np
import pytest

from app.models.config import TrainingConfig, build_model_config
from app.knowledge_base.presets import MICRO
from app.services import tensor_core as tc
from app.services.dataset import generate_splits, load_dataset
from app.services.model import MultiScaleModel
from app.services.training import Trainer


@pytest.fixture
def rng():
    return tc.make_rng(1234)


@pytest.fixture
def micro():
    return build_model_config(dict(MICRO))


@pytest.fixture
def micro_params(micro):
    """f64 parameters and BN buffers for the micro config."""
    return MultiScaleModel(micro).init_params(np.float64, 0.2)


@pytest.fixture
def short_training():
    return TrainingConfig(batch_size=4, steps=3, eval_interval=2, learning_rate=0.01)


@pytest.fixture(scope="session")
def data_dir(tmp_path_factory):
    """4 classes at 64×64: 4 train and 2 eval samples per class."""
    out = tmp_path_factory.mktemp("data")
    generate_splits(out, n_classes=4, n_per_class=4, image_size=64, seed=5, eval_per_class=2)
    return out


@pytest.fixture(scope="session")
def splits(data_dir):
    return load_dataset(data_dir / "train.bin"), load_dataset(data_dir / "eval.bin")


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, splits):
    """A micro model trained for a few steps, with its run directory."""
    out = tmp_path_factory.mktemp("run")
    config = build_model_config(dict(MICRO))
    training = TrainingConfig(batch_size=4, steps=3, eval_interval=2, learning_rate=0.01)
    train, held_out = splits
    Trainer(config, training, out_dir=out).train(train, held_out)
    return out, config
