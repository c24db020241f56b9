import pytest
import torch

from eagle import data as dt
from eagle import train
from eagle.config import load_config
from eagle.numeric import RngStream


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(preset="tiny").replace(n_images=24, n_classes=4)


@pytest.fixture(scope="session")
def tiny_manifest(tiny_cfg):
    return train.generate_dataset(tiny_cfg)


@pytest.fixture()
def tiny_model(tiny_cfg, tiny_manifest):
    return train.new_model(tiny_cfg, tiny_manifest.class_names)


@pytest.fixture()
def rng():
    return RngStream(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """A few dozen default-size images, generated once per session."""
    cfg = dt.DataConfig(n_images=40)
    return dt.generate(cfg, RngStream(7))


def randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)
