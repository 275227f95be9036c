"""Shared fixtures: a demo dataset on disk, generated once per session."""
from __future__ import annotations

import pytest

from xflex.pipeline import make_demo_dataset


@pytest.fixture(scope="session")
def demo_dir(tmp_path_factory):
    """Small synthetic fault/weather/band/config CSV bundle for pipeline tests."""
    out = tmp_path_factory.mktemp("demo")
    make_demo_dataset(out, seed=11)
    return out
