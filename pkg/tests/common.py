"""Shared builders and brute-force oracles for the envfield tests."""

from __future__ import annotations

from collections.abc import Callable, Sequence
import math

import numpy as np

from envfield.fmm import target_transform
from envfield.grid2d import DIRECTIONS_8, GridPos, OccupancyGrid

MAZE_ROWS = [
    "......",
    ".####.",
    ".#....",
    ".#.##.",
    "...#..",
    "#.....",
]


def grid_from(rows: Sequence[str]) -> OccupancyGrid:
    """Build a grid from '.'/'#' rows."""
    return OccupancyGrid.from_rows(rows)


def bellman_ford(grid: OccupancyGrid, goal: GridPos) -> np.ndarray:
    """Relax every legal move until nothing changes; unreachable cells stay inf."""
    dist = np.full(grid.shape, math.inf)
    dist[goal] = 0.0
    changed = True
    while changed:
        changed = False
        for row in range(grid.height):
            for col in range(grid.width):
                if not grid.is_accessible((row, col)):
                    continue
                for dr, dc in DIRECTIONS_8:
                    q = (row + dr, col + dc)
                    if not grid.can_move((row, col), q):
                        continue
                    candidate = dist[q] + math.hypot(dr, dc)
                    if candidate < dist[row, col] - 1e-12:
                        dist[row, col] = candidate
                        changed = True
    return dist


def central_difference(
    fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6
) -> np.ndarray:
    """Numerical gradient of a scalar function of an array."""
    grad = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = fn(x)
        flat[i] = saved - eps
        minus = fn(x)
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


class EuclideanField:
    """Analytic field 1 / (1 + |x - goal|) over normalized coordinates."""

    def __init__(self) -> None:
        self.calls = 0

    def point_values(self, grid, goal, points: np.ndarray) -> np.ndarray:
        self.calls += 1
        d = np.linalg.norm(np.asarray(points, dtype=float) - np.asarray(goal, dtype=float), axis=1)
        return target_transform(d)

    def point_gradients(self, grid, goal, points: np.ndarray) -> np.ndarray:
        diff = np.asarray(points, dtype=float) - np.asarray(goal, dtype=float)
        d = np.linalg.norm(diff, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(d > 0, diff / np.where(d > 0, d, 1.0), 0.0)
        return -unit / (1.0 + d) ** 2

    def scene_values(self, goal: np.ndarray, points: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(
            np.asarray(points, dtype=float).reshape(-1, 3) - np.asarray(goal).reshape(3), axis=1
        )
        return target_transform(d)


class TickClock:
    """Deterministic clock advancing a fixed amount per call."""

    def __init__(self, tick: float = 0.001) -> None:
        self.now = 0.0
        self.tick = tick

    def __call__(self) -> float:
        self.now += self.tick
        return self.now
