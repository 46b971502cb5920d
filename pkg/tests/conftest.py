"""Shared fixtures: the planar model file and a small self-body image trained once per session."""
import numpy as np
import pytest

from bodyimage.approximator import TrainConfig
from bodyimage.config import load_model_file
from bodyimage.self_body_image import LearnerSettings, build_initial_self_body_image

SMALL_LEARNER = LearnerSettings(
    hidden=24,
    ijmm_samples=400,
    mrcm_samples=600,
    holdout_samples=100,
    train=TrainConfig(optimizer="adam", learning_rate=0.02, batch_size=32, max_epochs=150,
                      lr_decay=0.995, patience=30),
)


@pytest.fixture(scope="session")
def planar_model():
    return load_model_file("planar_2dof")


@pytest.fixture(scope="session")
def small_planar_model(planar_model):
    """The planar model with a reduced learner, for tests that train."""
    return planar_model.model_copy(update={"learner": SMALL_LEARNER})


@pytest.fixture(scope="session")
def chain(planar_model):
    return planar_model.build_chain()


@pytest.fixture(scope="session")
def routing(planar_model, chain):
    return planar_model.build_routing(chain)


@pytest.fixture(scope="session")
def trained(chain, routing):
    return build_initial_self_body_image(chain, routing, SMALL_LEARNER, seed=0)


@pytest.fixture
def sbi(trained):
    """A fresh copy of the session self-body image; tests may modify it."""
    return trained[0].copy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
