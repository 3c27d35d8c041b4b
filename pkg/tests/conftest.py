import numpy as np
import pytest

from hysp_lab import trainer
from hysp_lab.config import load_config

from helpers import tiny_config


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_data(tiny_cfg):
    return trainer.make_dataset(tiny_cfg)


@pytest.fixture(scope="session")
def desk():
    """Seed-0 desk preset, pretrained once per session on the training split."""
    cfg = load_config(overrides={"seed": 0})
    dataset = trainer.make_dataset(cfg)
    ckpt, rows = trainer.pretrain(cfg, trainer.train_part(dataset, cfg))
    return cfg, dataset, ckpt, rows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
