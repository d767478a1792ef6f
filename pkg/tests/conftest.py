import numpy as np
import pytest
import torch

from maskdiff.backbone import build_model, preset
from maskdiff.data import make_synthetic_corpus


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")


@pytest.fixture(scope="session")
def tiny_config():
    return preset("tiny")


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return build_model(tiny_config, seed=0)


@pytest.fixture(scope="session")
def small_corpus():
    return make_synthetic_corpus(24, 64, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_(module, seed=0, scale=0.3):
    """Overwrite every parameter with random values (breaks the zero init)."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_config):
    """Checkpoint of a perturbed (non-identity) tiny model, stub conditioning on."""
    from maskdiff.conditioning import ConditionSource
    from maskdiff.pretrain import Checkpoint, PretrainConfig

    m = randomize_(build_model(tiny_config, seed=0), seed=11, scale=0.05)
    w = {k: v.detach().clone() for k, v in m.state_dict().items()}
    cfg = PretrainConfig(model=tiny_config, condition=ConditionSource("stub")).to_dict()
    return Checkpoint(0, w, {k: v.clone() for k, v in w.items()}, None, cfg)
