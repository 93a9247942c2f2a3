import numpy as np
import pytest

from choir.config import ChoirConfig
from choir.geometry import template_body_mesh


@pytest.fixture(scope="session")
def tiny_config():
    """Smallest config that still exercises every code path."""
    return ChoirConfig(frames=2, grid_h=2, grid_w=2, width=8, points=16, heads=4,
                       st_depth=1, knn_k=4, obs_channels=4, mesh_vertices=12,
                       clip_frames=4, dropout=0.1)


@pytest.fixture(scope="session")
def tiny_mesh(tiny_config):
    return template_body_mesh(tiny_config.mesh_vertices)


@pytest.fixture(scope="session")
def desk_config():
    return ChoirConfig()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
