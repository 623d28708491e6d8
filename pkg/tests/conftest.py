import dataclasses

import numpy as np
import pytest

from fallguard.config import PipelineConfig
from fallguard.model import default_model
from fallguard.physics import CollisionGeometry, Engine


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def cfg():
    return PipelineConfig()


@pytest.fixture()
def engine(model):
    return Engine(model)


@pytest.fixture(scope="session")
def tiny_dataset(cfg):
    """Small shared dataset for predictor/RL plumbing tests."""
    from fallguard.datagen import generate_dataset

    return generate_dataset(16, cfg, seed=101)


@pytest.fixture(scope="session")
def tiny_predictor(tiny_dataset, cfg):
    from fallguard.predictor import train_predictor

    pc = dataclasses.replace(cfg.predictor, epochs=6, batch=8)
    params, _ = train_predictor(tiny_dataset, pc, seed=5)
    return params
