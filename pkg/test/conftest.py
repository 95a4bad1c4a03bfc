#!/usr/bin/env python
# -*- coding: utf-8 -*-
# @Filename:    conftest.py

"""Shared fixtures: deliberately tiny model sizes so that every test graph
builds in milliseconds, and the FEDCONDI_SLOW gate for long runs."""

from os import environ
# non-system, pip installs
import numpy as np
import pytest
from fedcondi.datafabric import generate_synthetic
from fedcondi.diffusion import build_schedule
from fedcondi.model import ModelDims, init_params


def pytest_collection_modifyitems(config, items):
    if environ.get('FEDCONDI_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='set FEDCONDI_SLOW=1 to run')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def tiny_dims(**overrides) -> ModelDims:
    sizes = dict(modalities=2, features=2, classes=2, embed_dim=3,
                 context_dim=3, hidden=4, blocks=1, kernel=3, time_dim=4,
                 experts=2, top_k=1, encoder_hidden=4, encoder_kernel=3,
                 classifier_hidden=4)
    sizes.update(overrides)
    return ModelDims(**sizes)


@pytest.fixture
def dims() -> ModelDims:
    return tiny_dims()


@pytest.fixture
def params(dims):
    return init_params(dims, seed=0)


@pytest.fixture
def schedule():
    return build_schedule(5, 1e-4, 0.2)


@pytest.fixture
def samples():
    """Eight fully observed samples, M=2, L_ts=6, L_f=1"""
    return generate_synthetic(8, 2, 6, 1, 2, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
