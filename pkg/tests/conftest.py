from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from hesskit.models import Model, ModelSpec, build_model
from hesskit.pipeline.datasets import DatasetSpec, load_dataset

settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs():
    return load_dataset(DatasetSpec("synthetic-blobs", n=600, classes=3, seed=5, dims=4, noise=1.0))


@pytest.fixture(scope="session")
def images():
    return load_dataset(DatasetSpec("synthetic-blobs", n=400, classes=4, seed=2, image_shape=(3, 6, 6), noise=1.5))


def tiny_mlp(widths=(4, 6, 5, 3), seed=0) -> Model:
    return build_model(ModelSpec.mlp(list(widths)), seed)


def tiny_cnn(widths=(4, 6), seed=0, input_shape=(3, 6, 6), classes=4) -> Model:
    return build_model(ModelSpec("SmallConvNet", widths, classes, input_shape), seed)


def tiny_resnet(widths=(4, 3, 5), seed=0, input_shape=(3, 6, 6), classes=4) -> Model:
    return build_model(ModelSpec("MiniResNet", widths, classes, input_shape), seed)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
