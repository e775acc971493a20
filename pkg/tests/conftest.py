import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, n, k, floor=0.0):
    x = rng.dirichlet(np.ones(k), size=n) + floor
    return x / x.sum(axis=1, keepdims=True)


@pytest.fixture(scope="session")
def tiny_synce(tmp_path_factory):
    from fuzzyoc.synce import build_synce

    root = tmp_path_factory.mktemp("synce")
    return build_synce(root, certain_count=18, fuzzy_count=10, image_size=32, seed=3)


def pytest_report_header(config):
    from fuzzyoc import kernels

    return f"fuzzyoc kernels backend: {kernels.BACKEND} (FUZZYOC_DISABLE_NUMBA={os.environ.get('FUZZYOC_DISABLE_NUMBA', '')})"


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
