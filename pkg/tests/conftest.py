import numpy as np
import pytest
import torch

from passportnet.data import synthetic_task


@pytest.fixture(scope="session")
def tiny_train():
    return synthetic_task("train", n=256, seed=0)


@pytest.fixture(scope="session")
def tiny_test():
    return synthetic_task("test", n=128, seed=0)


@pytest.fixture(autouse=True)
def _quiet_torch_rng():
    # keep global RNG state independent across tests
    state = torch.get_rng_state()
    np_state = np.random.get_state()
    yield
    torch.set_rng_state(state)
    np.random.set_state(np_state)
