"""
Shared fixtures: a tiny trainable configuration, its dataset, and the float64 micro model
"""
import pytest
import torch

from src.config import (
    BackboneConfig,
    DataConfig,
    EvalConfig,
    RunConfig,
    SadConfig,
    TextConfig,
    TrainConfig,
)
from src.data.synth_data import generate_dataset
from src.models.meta_head import build_model
from tests.helpers import make_episode


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale reproduction, only runs with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_run_config(**sections) -> RunConfig:
    """8x8 images, 4 patches, C_d=16; small enough to train in seconds"""
    defaults = dict(
        data=DataConfig(
            image_size=8,
            patch_size=4,
            n_base=6,
            n_val=3,
            n_novel=5,
            images_per_class=12,
            shape_vocab=[0, 1, 2, 3],
            palette_vocab=[0, 1, 2, 3],
            max_offset=1,
        ),
        backbone=BackboneConfig(image_size=8, patch_size=4, depth=3, l_split=2, dim=16, heads=2),
        text=TextConfig(prefix_length=2, n_slots=5, token_dim=8),
        sad=SadConfig(samples=4),
        train=TrainConfig(
            pretrain_epochs=1,
            pretrain_batch_size=16,
            finetune_episodes=4,
            n_way=3,
            n_query=2,
            val_every=2,
            val_episodes=2,
            patience=1,
        ),
        eval=EvalConfig(n_episodes=4, n_way=3, n_query=2, workers=2),
    )
    defaults.update(sections)
    return RunConfig(**defaults)


def micro_run_config(**sections) -> RunConfig:
    """Single-channel 4x8 images split into 2 patches, C_d=8"""
    defaults = dict(
        data=DataConfig(
            image_size=(4, 8),
            channels=1,
            patch_size=4,
            n_base=2,
            n_val=0,
            n_novel=2,
            images_per_class=2,
            shape_vocab=[0, 1],
            palette_vocab=[0, 1],
        ),
        backbone=BackboneConfig(image_size=(4, 8), in_channels=1, patch_size=4, depth=2, l_split=1, dim=8, heads=2),
        text=TextConfig(prefix_length=2, n_slots=2, token_dim=4),
        sad=SadConfig(samples=3, train_mode="soft"),
        train=TrainConfig(n_way=2, n_query=1),
        eval=EvalConfig(n_way=2, n_query=1),
    )
    defaults.update(sections)
    return RunConfig(**defaults)


@pytest.fixture
def tiny_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_run_config().data)


@pytest.fixture
def micro_config() -> RunConfig:
    return micro_run_config()


@pytest.fixture
def micro_model(micro_config):
    return build_model(micro_config).double()


@pytest.fixture
def micro_episode():
    return make_episode(n_way=2, k_shot=1, n_query=1, image_shape=(1, 4, 8), seed=3)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
