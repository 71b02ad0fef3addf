import numpy as np
import pytest
import torch

from vtryon.config import RunConfig
from vtryon.synthdata import SceneConfig, SyntheticDataset, generate_dataset


def tiny_config(**overrides) -> RunConfig:
    """A model small enough for unit tests: 32x32 frames, 4x4 latent grid."""
    cfg = RunConfig()
    cfg.update({
        "data.height": 32, "data.width": 32, "data.frames": 3, "data.mask_area": [0.1, 0.3],
        "model.base_width": 16, "model.head_dim": 8, "model.time_dim": 32, "model.ae_widths": [8, 8, 8],
        "model.num_groups": 4, "atff.d_k": 8, "atff.num_groups": 4, "gpfa.embed_dim": 16, "gpfa.tokens": 2,
        "diffusion.T": 100, "train.batch_size": 2, "train.clips_per_batch": 1, "sample.steps": 3,
        "train.ckpt_every": 0, "train.log_every": 5,
    })
    cfg.update(overrides)
    return cfg


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_data")
    generate_dataset(root, 6, seed=11, cfg=SceneConfig(height=32, width=32, frames=3, mask_area=(0.1, 0.3)))
    return SyntheticDataset(root)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
