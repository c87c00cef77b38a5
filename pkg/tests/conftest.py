import pytest
import torch

from distillkit.datasets import make_gaussian_class_dataset
from distillkit.engine import DistillConfig, Embedder
from distillkit.losses import LossWeights
from distillkit.models import ExtractorSpec, pretrain_embedder

torch.set_num_threads(1)

TINY_SPEC = ExtractorSpec("convnet", 3, 8, 8)


@pytest.fixture(scope="session")
def tiny_real():
    return make_gaussian_class_dataset(3, 12, (3, 8, 8), 0.5, 0.1, seed=0, name="tiny")


@pytest.fixture(scope="session")
def tiny_embedder(tiny_real):
    return Embedder(TINY_SPEC, pretrain_embedder(TINY_SPEC, tiny_real, 5, 0))


@pytest.fixture
def tiny_config():
    return DistillConfig(dataset="tiny", ipc=2, batch_real=6, iterations=5, extractor=TINY_SPEC,
                         weights=LossWeights(0.05, 0.01, 1.0, 0.1))


@pytest.fixture(scope="session")
def toy_config():
    from distillkit.config import RunConfig

    return RunConfig()


@pytest.fixture(scope="session")
def toy_data(toy_config):
    from distillkit.config import load_data

    return load_data(toy_config.data)


@pytest.fixture(scope="session")
def toy_embedder(toy_config, toy_data):
    e = toy_config.embedder
    return Embedder(e.spec, pretrain_embedder(e.spec, toy_data[0], e.epochs, e.seed, e.recipe))
