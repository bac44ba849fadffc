"""Shared fixtures. Session-scoped training artifacts are built once and
reused across the unit and acceptance suites to keep the run fast."""

import numpy as np
import pytest

from breachlab import datagen, nnet
from breachlab.nnet import TrainConfig

TASK_SEED = 123


def train_standard(task, config=None):
    """Task-only model (no hidden distributions), the non-versioned baseline."""
    config = config or TrainConfig()
    dims = (task.input_dim, *config.hidden_dims, task.num_classes)
    init = nnet.init_model(dims, seed=config.seed)
    return nnet.sgd_train(init, task.train_x, task.train_y, config).model


@pytest.fixture(scope="session")
def glyph_task():
    """The default desk-scale task: 10 classes, 8x8, 200/50/100 per class."""
    return datagen.make_task("synthetic_glyphs", None, seed=TASK_SEED)


@pytest.fixture(scope="session")
def small_task():
    """A tiny 3-class task for fast unit tests (val split big enough to calibrate)."""
    params = {"num_classes": 3, "train_per_class": 60, "val_per_class": 40, "test_per_class": 40}
    return datagen.make_task("synthetic_glyphs", params, seed=7)


@pytest.fixture(scope="session")
def standard_model(glyph_task):
    return train_standard(glyph_task)


@pytest.fixture(scope="session")
def small_standard_model(small_task):
    return train_standard(small_task, TrainConfig(epochs=12))
