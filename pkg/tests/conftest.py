import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

# Single-threaded math keeps CPU reductions bitwise reproducible run to run.
torch.set_num_threads(1)

from dragedit.backbone import BackboneConfig, ToyBackbone

CHECKPOINT = os.path.join(os.path.dirname(__file__), "..", "checkpoints", "toy.pt")


@pytest.fixture(scope="session")
def backbone():
    """A freshly initialized (untrained) backbone. Fine for exactness and
    plumbing tests; useless for anything that needs a real denoiser."""
    return ToyBackbone.initialize(BackboneConfig(), seed=7)


@pytest.fixture(scope="session")
def trained_backbone():
    if not os.path.exists(CHECKPOINT):
        pytest.fail(f"missing trained checkpoint at {CHECKPOINT}; "
                    f"run: dragedit train-toy --out checkpoints/toy.pt")
    return ToyBackbone.load(CHECKPOINT)


@pytest.fixture()
def rng():
    return torch.Generator().manual_seed(0)
