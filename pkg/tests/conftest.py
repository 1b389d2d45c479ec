import numpy as np
import pytest
import torch

from skysense_mini.config import Config, config_from_dict
from skysense_mini.sample_io import Dataset
from skysense_mini.synthetic import WorldSpec, generate_dataset

torch.set_num_threads(2)


def tiny_config_dict() -> dict:
    """Small-but-real config used by most integration tests."""
    return {
        "seed": 7,
        "data": {"n_samples": 24, "t_ms": 4, "t_sar": 2},
        "model": {"dim": 32, "encoder_depth": 1, "fusion_depth": 1},
        "geo": {"n_prototypes": 4, "start_step": 0},
        "pretrain": {
            "steps": 6,
            "batch_size": 2,
            "warmup_steps": 2,
            "checkpoint_interval": 3,
            "head_hidden": 32,
            "head_out": 16,
            "align_dim": 16,
            "t_ms_view": 2,
            "t_sar_view": 1,
            "local_crops": 1,
            "n_clusters": 4,
        },
        "probe": {"epochs": 3},
    }


@pytest.fixture(scope="session")
def tiny_config() -> Config:
    return config_from_dict(tiny_config_dict())


@pytest.fixture(scope="session")
def tiny_dataset(tiny_config, tmp_path_factory) -> Dataset:
    root = tmp_path_factory.mktemp("tiny_data")
    spec = tiny_config.data.world_spec(tiny_config.seed)
    generate_dataset(spec, tiny_config.data.n_samples, root)
    return Dataset(root)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_world() -> WorldSpec:
    return WorldSpec(seed=3)
