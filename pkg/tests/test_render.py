"""Tests for field rendering."""

import numpy as np
import pytest

from envfield.exceptions import CheckpointError, PreconditionError
from envfield.fmm import bfs_hops
from envfield.grid2d import GridPos
from envfield.planner import PlanStatus, Trajectory
from envfield.render import (
    GOAL_RGB,
    OBSTACLE_RGB,
    PATH_RGB,
    START_RGB,
    heatmap,
    overlay_trajectory,
    read_ppm,
    write_contours_svg,
    write_ppm,
)

from .common import grid_from


def _row_trajectory():
    return Trajectory(
        points=[GridPos(0, 0), GridPos(0, 1), GridPos(0, 2)], status=PlanStatus.REACHED_GOAL
    )


class TestHeatmap:
    """Test raster heatmaps."""

    def test_colors(self):
        """Value 1 is white, 0 is black and obstacles are dark red."""
        values = np.array([[1.0, 0.0], [0.5, -1.0]])
        obstacles = np.array([[False, False], [False, True]])
        image = heatmap(values, obstacles, scale=1)
        assert image.dtype == np.uint8
        assert tuple(image[0, 0]) == (255, 255, 255)
        assert tuple(image[0, 1]) == (0, 0, 0)
        assert tuple(image[1, 0]) == (128, 128, 128)
        assert tuple(image[1, 1]) == OBSTACLE_RGB

    def test_scale(self):
        """Each cell becomes a scale x scale block."""
        values = np.array([[1.0, 0.0], [0.0, 1.0]])
        image = heatmap(values, np.zeros((2, 2), dtype=bool), scale=3)
        assert image.shape == (6, 6, 3)
        assert np.all(image[:3, :3] == 255)
        assert np.all(image[:3, 3:] == 0)

    def test_nan_is_dark(self):
        """Missing values render black."""
        image = heatmap(np.array([[np.nan, 1.0]]), np.zeros((1, 2), dtype=bool), scale=1)
        assert tuple(image[0, 0]) == (0, 0, 0)

    def test_invalid(self):
        """Mismatched shapes and bad scales raise."""
        with pytest.raises(PreconditionError):
            heatmap(np.zeros((2, 2)), np.zeros((2, 3), dtype=bool))
        with pytest.raises(PreconditionError):
            heatmap(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), scale=0)


class TestOverlay:
    """Test trajectory overlays."""

    def test_cell_trajectory(self):
        """Start is green, goal red and the path between is blue."""
        base = heatmap(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool), scale=4)
        image = overlay_trajectory(base, _row_trajectory(), (3, 3), scale=4)
        assert tuple(image[2, 2]) == START_RGB
        assert tuple(image[2, 10]) == GOAL_RGB
        assert tuple(image[2, 6]) == PATH_RGB
        assert tuple(image[10, 6]) == (0, 0, 0)
        assert tuple(base[2, 2]) == (0, 0, 0)

    def test_explicit_goal(self):
        """An explicit goal is marked even when the path stops short."""
        base = heatmap(np.zeros((3, 3)), np.zeros((3, 3), dtype=bool), scale=4)
        image = overlay_trajectory(base, _row_trajectory(), (3, 3), scale=4, goal=GridPos(2, 2))
        assert tuple(image[10, 10]) == GOAL_RGB

    def test_point_trajectory(self):
        """Normalized coordinates map onto the pixel grid."""
        base = heatmap(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool), scale=8)
        trajectory = Trajectory(points=[(-0.5, -0.5), (0.5, 0.5)], status=PlanStatus.REACHED_GOAL)
        image = overlay_trajectory(base, trajectory, (2, 2), scale=8)
        assert tuple(image[4, 4]) == START_RGB
        assert tuple(image[12, 12]) == GOAL_RGB
        assert tuple(image[8, 8]) == PATH_RGB


class TestFiles:
    """Test image files."""

    def test_ppm(self, tmp_path):
        """PPM files keep every pixel."""
        image = heatmap(np.array([[0.25, 1.0]]), np.array([[False, True]]), scale=2)
        path = tmp_path / "map.ppm"
        write_ppm(image, path)
        assert path.read_bytes().startswith(b"P6\n4 2\n255\n")
        assert np.array_equal(read_ppm(path), image)

    def test_foreign_ppm(self, tmp_path):
        """Other files are rejected."""
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(CheckpointError):
            read_ppm(path)

    def test_ppm_needs_rgb(self, tmp_path):
        """Grayscale arrays are rejected."""
        with pytest.raises(PreconditionError):
            write_ppm(np.zeros((2, 2), dtype=np.uint8), tmp_path / "gray.ppm")

    def test_contours_are_reproducible(self, tmp_path, small_maze):
        """The same field renders to the same SVG bytes."""
        distance_field = bfs_hops(small_maze, (5, 5))
        values = distance_field.transformed()
        first, second = tmp_path / "a.svg", tmp_path / "b.svg"
        for path in (first, second):
            write_contours_svg(
                values, small_maze.obstacles, path, levels=5, trajectory=_row_trajectory()
            )
        assert first.read_bytes() == second.read_bytes()
        assert b"<svg" in first.read_bytes()

    def test_flat_field(self, tmp_path):
        """A constant field has no level sets but still renders."""
        grid = grid_from(["..", ".."])
        path = tmp_path / "flat.svg"
        write_contours_svg(np.ones((2, 2)), grid.obstacles, path)
        assert path.stat().st_size > 0
