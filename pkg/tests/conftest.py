"""Shared fixtures: a miniature space and supernet the unit tests reuse."""

import numpy as np
import pytest

from elastic_ssl.archspace import BudgetSpec, DimRange, ModelSpace, flops
from elastic_ssl.data import synth_dataset
from elastic_ssl.supernet import build_supernet


def tiny_space() -> ModelSpace:
    return ModelSpace(
        stem=DimRange(8, 8, 1),
        widths=(
            DimRange(8, 8, 1),
            DimRange(8, 16, 8),
            DimRange(16, 16, 1),
            DimRange(16, 16, 1),
        ),
        depths=(
            DimRange(1, 1, 1),
            DimRange(1, 1, 1),
            DimRange(1, 2, 1),
            DimRange(1, 1, 1),
        ),
    )


def tiny_budget(space: ModelSpace) -> BudgetSpec:
    lo = flops(space.smallest(), space.input_resolution,
               expansion=space.expansion, stem_plan=space.stem_plan)
    hi = flops(space.largest(), space.input_resolution,
               expansion=space.expansion, stem_plan=space.stem_plan)
    return BudgetSpec(lo, hi + 1)


@pytest.fixture(scope="session")
def space():
    return tiny_space()


@pytest.fixture()
def state(space):
    return build_supernet(space, embed_dim=16, seed=0, projection_hidden=32)


@pytest.fixture(scope="session")
def shapes_train():
    return synth_dataset(4, 48, seed=0, split="train")


@pytest.fixture(scope="session")
def shapes_eval():
    return synth_dataset(4, 24, seed=0, split="val")


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
