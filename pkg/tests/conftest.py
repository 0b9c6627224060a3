import numpy as np
import pytest
import torch

from mvhead import synthdata, training


def tiny_train_config(**overrides):
    """Smallest config that exercises every code path; unit-test speed."""
    base = dict(
        t_steps=20,
        beta_start=1e-3,
        beta_end=0.05,
        image_size=16,
        n_views=4,
        subset_k=2,
        grid_size=4,
        context_channels=4,
        fusion_channels=4,
        frustum_base=4,
        cond_channels=4,
        depth_samples=3,
        base_channels=8,
        channel_mults=(1, 2),
        heads=2,
        emb_dim=8,
        batch_size=1,
        total_steps=4,
        warmup_steps=2,
        checkpoint_every=2,
        seed=0,
    )
    base.update(overrides)
    return training.TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_records():
    cfg = synthdata.SynthConfig(image_size=16, n_views=4)
    return synthdata.generate_corpus(2, base_seed=5, config=cfg)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
