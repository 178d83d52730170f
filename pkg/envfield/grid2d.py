"""Discrete 2D environments: occupancy grids, maze generation and coordinates."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .const import CELL_ACCESSIBLE, CELL_OBSTACLE, DEFAULT_MAX_RESAMPLES
from .exceptions import (
    CheckpointError,
    ImpossibleConfigurationError,
    OutOfBoundsError,
    PreconditionError,
)

_LOGGER = logging.getLogger(__name__)

# N, NE, E, SE, S, SW, W, NW as (row offset, col offset); north is row - 1.
DIRECTIONS_8: tuple[tuple[int, int], ...] = (
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
)

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
EIGHT_CONNECTED = ndimage.generate_binary_structure(2, 2)


class GridPos(NamedTuple):
    """Integer cell index."""

    row: int
    col: int


class NormCoord(NamedTuple):
    """Continuous coordinate in [-1, 1]^2; u follows columns, v follows rows."""

    u: float
    v: float


class OccupancyGrid:
    """Immutable map of accessible and obstacle cells.

    The cell array is stored as a read-only boolean array where ``True`` marks
    an obstacle. Grids compare and hash by content so they can key caches.
    """

    __slots__ = ("_obstacles", "_key")

    def __init__(self, obstacles: np.ndarray | Sequence[Sequence[bool]]) -> None:
        """Initialize the grid.

        Args:
            obstacles: 2D array-like, truthy entries are obstacles.

        Raises:
            PreconditionError: If the grid is smaller than 2x2 or has no
                accessible cell.
        """
        cells = np.array(obstacles, dtype=bool)
        if cells.ndim != 2 or cells.shape[0] < 2 or cells.shape[1] < 2:
            raise PreconditionError(
                f"occupancy grid must be at least 2x2, got shape {cells.shape}"
            )
        if cells.all():
            raise PreconditionError("occupancy grid has no accessible cell")
        cells.setflags(write=False)
        self._obstacles = cells
        self._key = (cells.shape, np.packbits(cells).tobytes())

    @classmethod
    def empty(cls, height: int, width: int) -> OccupancyGrid:
        """Return a fully accessible grid."""
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def from_rows(cls, rows: Iterable[str]) -> OccupancyGrid:
        """Build a grid from text rows of '.' and '#'."""
        parsed = []
        for line in rows:
            if any(ch not in (CELL_ACCESSIBLE, CELL_OBSTACLE) for ch in line):
                raise CheckpointError(f"invalid grid row: {line!r}")
            parsed.append([ch == CELL_OBSTACLE for ch in line])
        if len({len(row) for row in parsed}) > 1:
            raise CheckpointError("grid rows have different lengths")
        return cls(parsed)

    def to_rows(self) -> list[str]:
        """Return the grid as text rows of '.' and '#'."""
        return [
            "".join(CELL_OBSTACLE if cell else CELL_ACCESSIBLE for cell in row)
            for row in self._obstacles
        ]

    @property
    def height(self) -> int:
        return int(self._obstacles.shape[0])

    @property
    def width(self) -> int:
        return int(self._obstacles.shape[1])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def obstacles(self) -> np.ndarray:
        """Read-only boolean array, True on obstacle cells."""
        return self._obstacles

    @property
    def accessible(self) -> np.ndarray:
        """Boolean array, True on accessible cells."""
        return ~self._obstacles

    @property
    def accessible_count(self) -> int:
        return int(self._obstacles.size - np.count_nonzero(self._obstacles))

    def in_bounds(self, p: GridPos | tuple[int, int]) -> bool:
        return 0 <= p[0] < self.height and 0 <= p[1] < self.width

    def is_accessible(self, p: GridPos | tuple[int, int]) -> bool:
        return self.in_bounds(p) and not self._obstacles[p[0], p[1]]

    def check_bounds(self, p: GridPos | tuple[int, int]) -> None:
        """Raise OutOfBoundsError unless ``p`` lies inside the grid."""
        if not self.in_bounds(p):
            raise OutOfBoundsError(
                f"position {tuple(p)} outside {self.height}x{self.width} grid"
            )

    def can_move(self, p: GridPos | tuple[int, int], q: GridPos | tuple[int, int]) -> bool:
        """Return whether an agent may step from ``p`` to ``q`` in one move.

        ``q`` must be an accessible 8-neighbour of ``p``. Diagonal steps also
        need both orthogonal side cells accessible, so agents never clip
        obstacle corners.
        """
        dr, dc = q[0] - p[0], q[1] - p[1]
        if max(abs(dr), abs(dc)) != 1 or not self.is_accessible(q):
            return False
        if dr != 0 and dc != 0:
            return not (
                self._obstacles[p[0], q[1]] or self._obstacles[q[0], p[1]]
            )
        return True

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return self._key == other._key

    def __hash__(self) -> int:
        return hash(self._key)

    def __repr__(self) -> str:
        return (
            f"OccupancyGrid({self.height}x{self.width}, "
            f"accessible={self.accessible_count})"
        )


def generate_maze(
    width: int,
    height: int,
    obstacle_density: float,
    seed: int,
    max_resamples: int = DEFAULT_MAX_RESAMPLES,
) -> OccupancyGrid:
    """Generate a random obstacle field whose free cells form one component.

    Obstacles are drawn independently per cell and redrawn until the
    accessible cells are 4-connected (which implies 8-connectivity). Diagonal
    moves never cut corners, so 4-connectivity is exactly what the agents'
    move rule needs for every start to reach every goal.

    Args:
        width: Number of columns (>= 2).
        height: Number of rows (>= 2).
        obstacle_density: Per-cell obstacle probability in [0, 1).
        seed: Seed for the random generator.
        max_resamples: Number of draws before giving up.

    Returns:
        The generated grid.

    Raises:
        PreconditionError: If the dimensions or density are invalid.
        ImpossibleConfigurationError: If no connected draw was found.
    """
    if width < 2 or height < 2:
        raise PreconditionError(f"maze must be at least 2x2, got {height}x{width}")
    if not 0.0 <= obstacle_density < 1.0:
        raise PreconditionError(
            f"obstacle density must lie in [0, 1), got {obstacle_density}"
        )

    rng = np.random.default_rng(seed)
    for attempt in range(max_resamples):
        obstacles = rng.random((height, width)) < obstacle_density
        free = ~obstacles
        if np.count_nonzero(free) < 2:
            continue
        _, components = ndimage.label(free, structure=FOUR_CONNECTED)
        if components == 1:
            _LOGGER.debug(
                "Generated %dx%d maze (density %.2f, seed %d) after %d draws",
                height,
                width,
                obstacle_density,
                seed,
                attempt + 1,
            )
            return OccupancyGrid(obstacles)

    raise ImpossibleConfigurationError(
        f"no connected {height}x{width} maze with density {obstacle_density} "
        f"found in {max_resamples} draws"
    )


def is_connected(grid: OccupancyGrid) -> bool:
    """Return whether the accessible cells form a single 4-connected component."""
    _, components = ndimage.label(grid.accessible, structure=FOUR_CONNECTED)
    return components == 1


def sample_accessible_pair(grid: OccupancyGrid, seed: int) -> tuple[GridPos, GridPos]:
    """Sample two distinct accessible cells; the second is meant as the goal."""
    free = np.flatnonzero(grid.accessible.ravel())
    if free.size < 2:
        raise PreconditionError("need at least two accessible cells to sample a pair")
    rng = np.random.default_rng(seed)
    first, second = rng.choice(free.size, size=2, replace=False)
    return _unravel(grid, int(free[first])), _unravel(grid, int(free[second]))


def accessible_cells(grid: OccupancyGrid) -> list[GridPos]:
    """Return every accessible cell in row-major order."""
    rows, cols = np.nonzero(grid.accessible)
    return [GridPos(int(r), int(c)) for r, c in zip(rows, cols)]


def to_norm(grid: OccupancyGrid, p: GridPos | tuple[int, int]) -> NormCoord:
    """Map a cell to the normalized coordinate of its center.

    Raises:
        OutOfBoundsError: If ``p`` lies outside the grid.
    """
    grid.check_bounds(p)
    return NormCoord(
        2.0 * (p[1] + 0.5) / grid.width - 1.0,
        2.0 * (p[0] + 0.5) / grid.height - 1.0,
    )


def from_norm(grid: OccupancyGrid, c: NormCoord | tuple[float, float]) -> GridPos:
    """Map a normalized coordinate back to the cell whose center is nearest.

    Raises:
        OutOfBoundsError: If the coordinate falls outside the grid.
    """
    col = int(round((c[0] + 1.0) * grid.width / 2.0 - 0.5))
    row = int(round((c[1] + 1.0) * grid.height / 2.0 - 0.5))
    p = GridPos(row, col)
    grid.check_bounds(p)
    return p


def cells_to_norm(grid: OccupancyGrid, cells: Sequence[GridPos] | np.ndarray) -> np.ndarray:
    """Vectorized ``to_norm``: (N, 2) cells as (row, col) to (N, 2) (u, v)."""
    arr = np.asarray(cells, dtype=float).reshape(-1, 2)
    out = np.empty_like(arr)
    out[:, 0] = 2.0 * (arr[:, 1] + 0.5) / grid.width - 1.0
    out[:, 1] = 2.0 * (arr[:, 0] + 0.5) / grid.height - 1.0
    return out


def cells_at_norm(
    grid: OccupancyGrid, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Locate the cells containing continuous points.

    Args:
        grid: The grid.
        points: (N, 2) array of (u, v) coordinates.

    Returns:
        Tuple of (rows, cols, inside); rows/cols are clipped into the grid and
        ``inside`` flags points that lie within [-1, 1]^2.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    inside = np.all((pts >= -1.0) & (pts <= 1.0), axis=1)
    cols = np.clip(np.floor((pts[:, 0] + 1.0) * grid.width / 2.0), 0, grid.width - 1)
    rows = np.clip(np.floor((pts[:, 1] + 1.0) * grid.height / 2.0), 0, grid.height - 1)
    return rows.astype(int), cols.astype(int), inside


def cell_at_norm(grid: OccupancyGrid, point: NormCoord | tuple[float, float]) -> GridPos | None:
    """Return the cell containing ``point`` or None when it lies outside the grid."""
    rows, cols, inside = cells_at_norm(grid, np.asarray(point, dtype=float))
    if not inside[0]:
        return None
    return GridPos(int(rows[0]), int(cols[0]))


def neighbors8(grid: OccupancyGrid, p: GridPos | tuple[int, int]) -> list[GridPos]:
    """Return in-bounds 8-neighbours in N, NE, E, SE, S, SW, W, NW order.

    Accessibility is not filtered; callers decide which neighbours are usable.
    """
    grid.check_bounds(p)
    return [
        GridPos(p[0] + dr, p[1] + dc)
        for dr, dc in DIRECTIONS_8
        if grid.in_bounds((p[0] + dr, p[1] + dc))
    ]


def legal_moves(grid: OccupancyGrid, p: GridPos | tuple[int, int]) -> list[GridPos]:
    """Return the neighbours an agent at ``p`` may step to, in direction order."""
    return [q for q in neighbors8(grid, p) if grid.can_move(p, q)]


def mark_obstacles(
    grid: OccupancyGrid, positions: Iterable[GridPos | tuple[int, int]]
) -> OccupancyGrid:
    """Return a copy of ``grid`` with the listed cells turned into obstacles.

    Raises:
        OutOfBoundsError: If a position lies outside the grid.
    """
    cells = np.array(grid.obstacles)
    for p in positions:
        grid.check_bounds(p)
        cells[p[0], p[1]] = True
    return OccupancyGrid(cells)


def grid_to_text(grid: OccupancyGrid) -> str:
    """Serialize a grid: "<height> <width>" then one row of '.'/'#' per line."""
    return f"{grid.height} {grid.width}\n" + "\n".join(grid.to_rows()) + "\n"


def grid_from_text(text: str) -> OccupancyGrid:
    """Parse the grid text format.

    Raises:
        CheckpointError: If the header or rows are malformed.
    """
    lines = text.splitlines()
    if not lines:
        raise CheckpointError("empty grid file")
    try:
        height, width = (int(tok) for tok in lines[0].split())
    except ValueError as err:
        raise CheckpointError(f"invalid grid header: {lines[0]!r}") from err
    rows = lines[1 : 1 + height]
    if len(rows) != height or any(len(row) != width for row in rows):
        raise CheckpointError(f"grid body does not match header {height}x{width}")
    return OccupancyGrid.from_rows(rows)


def write_grid(grid: OccupancyGrid, path: str | Path) -> None:
    """Write a grid to ``path`` in the grid text format."""
    Path(path).write_text(grid_to_text(grid), encoding="utf-8")


def read_grid(path: str | Path) -> OccupancyGrid:
    """Read a grid written by ``write_grid``."""
    return grid_from_text(Path(path).read_text(encoding="utf-8"))


def _unravel(grid: OccupancyGrid, flat: int) -> GridPos:
    row, col = divmod(flat, grid.width)
    return GridPos(row, col)
