"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from drecusum.core import RandomSource
from drecusum.dre import MlpConfig
from drecusum.eval import generate_synthetic, preset
from drecusum.ratios import OracleRatio

# A deliberately small network: pipeline plumbing tests need a learned
# source, not an accurate one.
TINY_MLP = MlpConfig(hidden_widths=(16,), iterations=60)


def oracle_case(name: str, seed: int, **params):
    """Series, truth and exact-ratio source for a named preset."""
    series, truth, specs = generate_synthetic(preset(name, **params), RandomSource(seed), return_specs=True)
    return series, truth, OracleRatio(specs, truth)


@pytest.fixture
def fig2b_case():
    return oracle_case("fig2b", 3)


@pytest.fixture
def fig3b_case():
    return oracle_case("fig3b", 3)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
