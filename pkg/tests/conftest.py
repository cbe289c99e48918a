import numpy as np
import pytest
import torch

from fpgan.augment import AugmentPolicy
from fpgan.feature_net import FeatureNetworkSpec, load_feature_network
from fpgan.generator import GeneratorConfig
from fpgan.projector import ProjectionConfig
from fpgan.trainer import RunConfig, Trainer

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_feature_net():
    return load_feature_network(
        FeatureNetworkSpec("tiny_debug", 64, pretrained=False, seed=3)
    )


def debug_trainer(seed=0, batch_size=8, mode="projected", run_dir=None, **run_kw):
    """Small projected trainer at R=64 used across integration tests."""
    run_kw.setdefault("total_imgs", 10_000)
    run_kw.setdefault("snapshot_imgs", 1_000)
    return Trainer(
        generator_cfg=GeneratorConfig(latent_dim=64, output_resolution=64,
                                      base_channels=16),
        run_cfg=RunConfig(batch_size=batch_size, mode=mode, **run_kw),
        augment_policy=AugmentPolicy(),
        feature_spec=(
            FeatureNetworkSpec("tiny_debug", 64, pretrained=False, seed=3)
            if mode == "projected" else None
        ),
        projection_cfg=ProjectionConfig(mode="ccm_csm", seed=5)
        if mode == "projected" else None,
        seed=seed,
        run_dir=run_dir,
    )


def toy_batch(n=8, resolution=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, resolution, resolution, generator=g) * 2 - 1


@pytest.fixture
def real_batch():
    return toy_batch()


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
