import numpy as np
import pytest
import torch

from fgsty.core import ExperimentConfig, Sample, seeded_rng

# keep CPU math reproducible within a test session
torch.set_num_threads(2)


@pytest.fixture
def rng():
    return seeded_rng(1234)


def random_image(rng, size=16, lo=0.0, hi=1.0):
    return rng.uniform(lo, hi, size=(size, size, 3)).astype(np.float32)


def random_mask(rng, size=16, p=0.3):
    return rng.random((size, size)) < p


def make_sample(rng, size=16, domain="d", sample_id="s0", labeled=True, lo=0.0, hi=1.0):
    return Sample(
        image=random_image(rng, size, lo, hi),
        mask=random_mask(rng, size) if labeled else None,
        domain_id=domain,
        sample_id=sample_id,
    )


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig(
        epochs=4,
        batch_size=4,
        learning_rate=2e-3,
        resolution=32,
        seed=7,
    )
