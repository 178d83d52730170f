"""Ground-truth reaching-distance oracles on occupancy grids and voxel grids."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
import heapq
import itertools
import logging
import math
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .const import (
    CELL_OBSTACLE,
    DEFAULT_OBSTACLE_VALUE,
    ORACLE_DIJKSTRA,
    ORACLE_FMM,
    ORACLE_HOPS,
    UNREACHABLE_TOKEN,
)
from .exceptions import CheckpointError, GoalOnObstacleError, PreconditionError
from .grid2d import GridPos, OccupancyGrid, legal_moves

_LOGGER = logging.getLogger(__name__)

_AXIS_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))
_SQRT2 = math.sqrt(2.0)


def target_transform(distances: np.ndarray | float) -> np.ndarray:
    """Map raw distances to regression targets 1 / (1 + d); infinite distances map to 0."""
    d = np.asarray(distances, dtype=float)
    finite = np.isfinite(d)
    return np.where(finite, 1.0 / (1.0 + np.where(finite, d, 0.0)), 0.0)


@dataclass(frozen=True, kw_only=True, eq=False)
class DistanceField:
    """Per-cell reaching distance to ``goal``; ``inf`` marks unreachable cells."""

    values: np.ndarray
    goal: GridPos
    obstacles: np.ndarray
    oracle: str = ORACLE_DIJKSTRA

    def __post_init__(self) -> None:
        _freeze(self, "values", float)
        _freeze(self, "obstacles", bool)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def reachable(self) -> np.ndarray:
        return np.isfinite(self.values)

    def value_at(self, p: GridPos | tuple[int, int]) -> float:
        return float(self.values[p[0], p[1]])

    def transformed(self, obstacle_value: float = DEFAULT_OBSTACLE_VALUE) -> np.ndarray:
        """Return the regression targets for every cell.

        Obstacles get ``obstacle_value``, unreachable accessible cells 0 and
        every other cell 1 / (1 + d).
        """
        out = target_transform(self.values)
        out[self.obstacles] = obstacle_value
        return out


@dataclass(frozen=True, kw_only=True, eq=False)
class VoxelGrid:
    """Axis-aligned voxelization of a scene volume.

    ``accessible`` is indexed (x, y, z); ``lower`` and ``upper`` are the scene
    space corners of the voxelized box.
    """

    accessible: np.ndarray
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def __post_init__(self) -> None:
        _freeze(self, "accessible", bool)
        if self.accessible.ndim != 3:
            raise PreconditionError(
                f"voxel grid must be 3D, got shape {self.accessible.shape}"
            )
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise PreconditionError(f"degenerate voxel bounds {self.lower}..{self.upper}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.accessible.shape)  # type: ignore[return-value]

    @property
    def voxel_size(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / np.asarray(self.shape)

    @property
    def accessible_count(self) -> int:
        return int(np.count_nonzero(self.accessible))

    def centers(self, indices: np.ndarray | tuple[int, int, int]) -> np.ndarray:
        """Return scene-space centers of voxel indices, shape (N, 3)."""
        idx = np.asarray(indices, dtype=float).reshape(-1, 3)
        return np.asarray(self.lower) + (idx + 0.5) * self.voxel_size

    def index_of(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Locate the voxels containing scene-space points.

        Returns:
            Tuple of (indices, inside); indices are clipped into the grid and
            ``inside`` flags points within the voxelized box.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        inside = np.all((pts >= lower) & (pts <= upper), axis=1)
        idx = np.floor((pts - lower) / self.voxel_size).astype(int)
        idx = np.clip(idx, 0, np.asarray(self.shape) - 1)
        return idx, inside

    def is_free(self, points: np.ndarray) -> np.ndarray:
        """Return True for points inside the box whose voxel is accessible."""
        idx, inside = self.index_of(points)
        return inside & self.accessible[idx[:, 0], idx[:, 1], idx[:, 2]]

    def to_norm(self, points: np.ndarray) -> np.ndarray:
        """Map scene-space points into [-1, 1]^3 by the voxel box."""
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        return 2.0 * (np.asarray(points, dtype=float) - lower) / (upper - lower) - 1.0


@dataclass(frozen=True, kw_only=True, eq=False)
class Distance3DField:
    """Per-voxel reaching distance in voxel units; ``inf`` marks unreachable voxels."""

    values: np.ndarray
    goal: tuple[int, int, int]
    voxels: VoxelGrid = field(repr=False)

    def __post_init__(self) -> None:
        _freeze(self, "values", float)

    @property
    def goal_point(self) -> np.ndarray:
        return self.voxels.centers(self.goal)[0]

    def transformed(self, obstacle_value: float = DEFAULT_OBSTACLE_VALUE) -> np.ndarray:
        out = target_transform(self.values)
        out[~self.voxels.accessible] = obstacle_value
        return out


def _check_goal(grid: OccupancyGrid, goal: GridPos | tuple[int, int]) -> GridPos:
    grid.check_bounds(goal)
    if not grid.is_accessible(goal):
        raise GoalOnObstacleError(f"goal {tuple(goal)} is an obstacle cell")
    return GridPos(int(goal[0]), int(goal[1]))


def _eikonal_update(values: np.ndarray, accepted: np.ndarray, row: int, col: int) -> float:
    """First-order upwind solve of |grad u| = 1 from accepted neighbours."""
    height, width = values.shape
    horizontal = math.inf
    for c in (col - 1, col + 1):
        if 0 <= c < width and accepted[row, c]:
            horizontal = min(horizontal, values[row, c])
    vertical = math.inf
    for r in (row - 1, row + 1):
        if 0 <= r < height and accepted[r, col]:
            vertical = min(vertical, values[r, col])

    a, b = horizontal, vertical
    if math.isfinite(a) and math.isfinite(b) and abs(a - b) < 1.0:
        return (a + b + math.sqrt(2.0 - (a - b) ** 2)) / 2.0
    return min(a, b) + 1.0


def fmm_solve(grid: OccupancyGrid, goal: GridPos | tuple[int, int]) -> DistanceField:
    """Solve the unit-speed Eikonal equation from ``goal`` by fast marching.

    Uses a 4-neighbour stencil with unit spacing. Obstacles never join the
    front, so they and any cell cut off from the goal stay ``inf``. The
    narrow band is a heap keyed by (tentative value, flat cell index).

    Raises:
        GoalOnObstacleError: If ``goal`` is not accessible.
    """
    goal = _check_goal(grid, goal)
    height, width = grid.shape
    free = grid.accessible
    values = np.full((height, width), np.inf)
    accepted = np.zeros((height, width), dtype=bool)

    values[goal] = 0.0
    band: list[tuple[float, int]] = [(0.0, goal.row * width + goal.col)]
    while band:
        value, flat = heapq.heappop(band)
        row, col = divmod(flat, width)
        if accepted[row, col] or value > values[row, col]:
            continue
        accepted[row, col] = True
        for dr, dc in _AXIS_STEPS:
            r, c = row + dr, col + dc
            if not (0 <= r < height and 0 <= c < width):
                continue
            if accepted[r, c] or not free[r, c]:
                continue
            candidate = _eikonal_update(values, accepted, r, c)
            if candidate < values[r, c]:
                values[r, c] = candidate
                heapq.heappush(band, (candidate, r * width + c))

    _LOGGER.debug(
        "FMM solved %dx%d grid from %s, %d cells reached",
        height,
        width,
        goal,
        int(np.count_nonzero(accepted)),
    )
    return DistanceField(
        values=values, goal=goal, obstacles=np.array(grid.obstacles), oracle=ORACLE_FMM
    )


def grid_graph(grid: OccupancyGrid) -> coo_matrix:
    """Build the 8-connected move graph of ``grid`` with Euclidean edge weights.

    Edges follow ``OccupancyGrid.can_move``: both cells accessible and, for
    diagonal steps, both orthogonal side cells accessible too.
    """
    free = ~np.asarray(grid.obstacles, dtype=bool)
    height, width = free.shape
    rr, cc = np.nonzero(free)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    for dr, dc in ((0, 1), (1, -1), (1, 0), (1, 1)):  # each undirected edge once
        qr, qc = rr + dr, cc + dc
        inside = (qr >= 0) & (qr < height) & (qc >= 0) & (qc < width)
        pr, pc, qr, qc = rr[inside], cc[inside], qr[inside], qc[inside]
        ok = free[qr, qc]
        if dr and dc:
            ok &= free[pr, qc] & free[qr, pc]
        rows.append(pr[ok] * width + pc[ok])
        cols.append(qr[ok] * width + qc[ok])
        weights.append(np.full(int(np.count_nonzero(ok)), _SQRT2 if dr and dc else 1.0))
    return coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(free.size, free.size),
    )


def dijkstra_solve(grid: OccupancyGrid, goal: GridPos | tuple[int, int]) -> DistanceField:
    """Shortest 8-connected path lengths to ``goal``.

    Axis steps cost 1 and diagonal steps sqrt(2); diagonal steps follow the
    agent move rule, so obstacle corners are never cut.

    Raises:
        GoalOnObstacleError: If ``goal`` is not accessible.
    """
    goal = _check_goal(grid, goal)
    source = goal.row * grid.width + goal.col
    distances = dijkstra(grid_graph(grid).tocsr(), directed=False, indices=source)
    values = np.asarray(distances, dtype=float).reshape(grid.shape)
    values[np.asarray(grid.obstacles, dtype=bool)] = np.inf
    return DistanceField(
        values=values,
        goal=goal,
        obstacles=np.array(grid.obstacles),
        oracle=ORACLE_DIJKSTRA,
    )


def bfs_hops(grid: OccupancyGrid, goal: GridPos | tuple[int, int]) -> DistanceField:
    """Minimum number of agent moves from every cell to ``goal``.

    Raises:
        GoalOnObstacleError: If ``goal`` is not accessible.
    """
    goal = _check_goal(grid, goal)
    values = np.full(grid.shape, np.inf)
    values[goal] = 0.0
    frontier = deque([goal])
    while frontier:
        p = frontier.popleft()
        for q in legal_moves(grid, p):
            if not np.isfinite(values[q]):
                values[q] = values[p] + 1.0
                frontier.append(q)
    return DistanceField(
        values=values, goal=goal, obstacles=np.array(grid.obstacles), oracle=ORACLE_HOPS
    )


ORACLE_SOLVERS = {
    ORACLE_FMM: fmm_solve,
    ORACLE_DIJKSTRA: dijkstra_solve,
    ORACLE_HOPS: bfs_hops,
}


def solve(grid: OccupancyGrid, goal: GridPos | tuple[int, int], oracle: str) -> DistanceField:
    """Dispatch to the named oracle."""
    try:
        solver = ORACLE_SOLVERS[oracle]
    except KeyError as err:
        raise PreconditionError(f"unknown oracle {oracle!r}") from err
    return solver(grid, goal)


def voxel_offsets() -> list[tuple[int, int, int]]:
    """Return the 26 neighbour offsets in lexicographic order."""
    return [
        offset
        for offset in itertools.product((-1, 0, 1), repeat=3)
        if offset != (0, 0, 0)
    ]


def voxel_graph(voxels: VoxelGrid) -> coo_matrix:
    """Build the 26-connected accessibility graph with Euclidean edge weights."""
    accessible = voxels.accessible
    shape = accessible.shape
    flat_index = np.arange(accessible.size).reshape(shape)
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    weights: list[np.ndarray] = []
    for offset in voxel_offsets():
        if offset < (0, 0, 0):
            continue  # each undirected edge once
        src = tuple(slice(max(0, -o), n - max(0, o)) for o, n in zip(offset, shape))
        dst = tuple(slice(max(0, o), n - max(0, -o)) for o, n in zip(offset, shape))
        both = accessible[src] & accessible[dst]
        rows.append(flat_index[src][both])
        cols.append(flat_index[dst][both])
        weights.append(np.full(int(np.count_nonzero(both)), math.sqrt(sum(o * o for o in offset))))
    return coo_matrix(
        (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
        shape=(accessible.size, accessible.size),
    )


def dijkstra3d_solve(voxels: VoxelGrid, goal: tuple[int, int, int]) -> Distance3DField:
    """Shortest 26-connected path lengths, in voxel units, to ``goal``.

    Raises:
        GoalOnObstacleError: If the goal voxel is outside the grid or not accessible.
    """
    shape = voxels.shape
    if not all(0 <= g < n for g, n in zip(goal, shape)):
        raise GoalOnObstacleError(f"goal voxel {tuple(goal)} outside grid {shape}")
    if not voxels.accessible[goal]:
        raise GoalOnObstacleError(f"goal voxel {tuple(goal)} is not accessible")

    source = int(np.ravel_multi_index(goal, shape))
    distances = dijkstra(voxel_graph(voxels).tocsr(), directed=False, indices=source)
    values = np.asarray(distances, dtype=float).reshape(shape)
    values[~voxels.accessible] = np.inf
    _LOGGER.debug(
        "Voxel Dijkstra from %s reached %d of %d accessible voxels",
        goal,
        int(np.count_nonzero(np.isfinite(values))),
        voxels.accessible_count,
    )
    return Distance3DField(
        values=values, goal=tuple(int(g) for g in goal), voxels=voxels  # type: ignore[arg-type]
    )


def field_to_text(distance_field: DistanceField) -> str:
    """Serialize a DistanceField.

    Header "<height> <width>", then "goal <row> <col>", then one line per row
    of space-separated tokens: '#' for obstacles, 'inf' for unreachable cells
    and fixed-point values with six decimals otherwise.
    """
    lines = [
        f"{distance_field.height} {distance_field.width}",
        f"goal {distance_field.goal.row} {distance_field.goal.col}",
    ]
    for values, obstacles in zip(distance_field.values, distance_field.obstacles):
        tokens = []
        for value, obstacle in zip(values, obstacles):
            if obstacle:
                tokens.append(CELL_OBSTACLE)
            elif not math.isfinite(value):
                tokens.append(UNREACHABLE_TOKEN)
            else:
                tokens.append(f"{value:.6f}")
        lines.append(" ".join(tokens))
    return "\n".join(lines) + "\n"


def field_from_text(text: str, oracle: str = ORACLE_DIJKSTRA) -> DistanceField:
    """Parse the DistanceField text format.

    Raises:
        CheckpointError: If the text is malformed.
    """
    lines = text.splitlines()
    try:
        height, width = (int(tok) for tok in lines[0].split())
        tag, row, col = lines[1].split()
        if tag != "goal":
            raise ValueError(f"expected goal line, got {lines[1]!r}")
        body = [line.split() for line in lines[2 : 2 + height]]
        if len(body) != height or any(len(tokens) != width for tokens in body):
            raise ValueError(f"field body does not match header {height}x{width}")
        obstacles = np.array([[tok == CELL_OBSTACLE for tok in tokens] for tokens in body])
        values = np.array(
            [
                [
                    np.inf if tok in (CELL_OBSTACLE, UNREACHABLE_TOKEN) else float(tok)
                    for tok in tokens
                ]
                for tokens in body
            ]
        )
    except (IndexError, ValueError) as err:
        raise CheckpointError(f"invalid distance field: {err}") from err
    return DistanceField(
        values=values,
        goal=GridPos(int(row), int(col)),
        obstacles=obstacles,
        oracle=oracle,
    )


def write_field(distance_field: DistanceField, path: str | Path) -> None:
    Path(path).write_text(field_to_text(distance_field), encoding="utf-8")


def read_field(path: str | Path, oracle: str = ORACLE_DIJKSTRA) -> DistanceField:
    return field_from_text(Path(path).read_text(encoding="utf-8"), oracle=oracle)


def field_grid(distance_field: DistanceField) -> OccupancyGrid:
    """Rebuild the occupancy grid a field was solved on."""
    return OccupancyGrid(distance_field.obstacles)


def _freeze(instance: object, name: str, dtype: type) -> None:
    array = np.array(getattr(instance, name), dtype=dtype)
    array.setflags(write=False)
    object.__setattr__(instance, name, array)
