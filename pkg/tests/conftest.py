import warnings

import pytest
import torch

from tenet.backbone import EncoderConfig
from tenet.data import DatasetSpec, generate_synthetic_dataset
from tenet.model import ModelConfig, TENet

SMALL_ENCODER = EncoderConfig(base_channels=8, dilation_levels=2, level_channels=4)
SMALL_MODEL = ModelConfig(encoder=SMALL_ENCODER, decoder_widths=(8, 8, 4, 4))


def small_model(seed=0, dtype=torch.float64, **overrides):
    torch.manual_seed(seed)
    cfg = ModelConfig(**{**SMALL_MODEL.__dict__, **overrides})
    return TENet(cfg).to(dtype)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    """Five 4-frame 64x64 clips (the default DatasetSpec), generated once."""
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic_dataset(DatasetSpec(seed=0), root)
    return root


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield
