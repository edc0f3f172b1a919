"""Shared fixtures: small synthetic datasets reused across test modules."""

import pytest

from candledp import market_data as md


@pytest.fixture(scope="session")
def small_dataset() -> md.Dataset:
    """25 train / 10 test windows per class; enough for structural tests."""
    return md.build_dataset(25, 10, seed=42)


@pytest.fixture(scope="session")
def micro_dataset() -> md.Dataset:
    """8 train / 4 test per class; for tests that actually train models."""
    return md.build_dataset(8, 4, seed=13)
