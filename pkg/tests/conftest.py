import pytest
import torch

from poisonlab.datasets import SyntheticSignSpec, generate_synthetic_signs

torch.set_flush_denormal(True)


@pytest.fixture(scope="session")
def tiny_spec():
    # small enough that training loops run in seconds
    return SyntheticSignSpec(num_classes=4, image_size=16, train_per_class=12, eval_per_class=6, seed=7)


@pytest.fixture(scope="session")
def tiny_data(tiny_spec):
    return generate_synthetic_signs(tiny_spec)


@pytest.fixture(scope="session")
def tiny_train(tiny_data):
    return tiny_data[0]


@pytest.fixture(scope="session")
def tiny_eval(tiny_data):
    return tiny_data[1]
