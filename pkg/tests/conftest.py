"""Test fixtures and utilities."""

import pytest

from envfield.grid2d import OccupancyGrid, generate_maze
from envfield.scene3d import Box, Scene3D

from .common import MAZE_ROWS, grid_from


@pytest.fixture
def empty_grid():
    """An 8x8 grid without obstacles."""
    return OccupancyGrid.empty(8, 8)


@pytest.fixture
def small_maze():
    """A hand-drawn 6x6 maze with a winding corridor."""
    return grid_from(MAZE_ROWS)


@pytest.fixture
def random_maze():
    """A connected 11x11 maze."""
    return generate_maze(11, 11, 0.25, seed=7)


@pytest.fixture
def room():
    """A 4x4 room with one table and one seat."""
    return Scene3D(
        x_range=(0.0, 4.0),
        z_range=(0.0, 4.0),
        wall_height=2.5,
        boxes=(
            Box(lower=(0.5, 0.0, 0.5), upper=(1.5, 0.8, 1.5), seat=False),
            Box(lower=(2.5, 0.0, 2.5), upper=(3.3, 0.45, 3.3), seat=True),
        ),
    )


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    """Point the default output root at a temp directory."""
    root = tmp_path / "runs"
    monkeypatch.setenv("ENVFIELD_OUTPUT_ROOT", str(root))
    return root
