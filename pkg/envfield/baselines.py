"""Sampling-based comparison planners: RRT and PRM over collision spaces."""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
import logging
import math
from typing import Any

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree

from .const import (
    BASELINE_PRM,
    BASELINE_RRT,
    CONF_PRM_NEIGHBORS,
    CONF_PRM_SAMPLES,
    CONF_RRT_GOAL_BIAS,
    CONF_RRT_MAX_ITERS,
    CONF_RRT_STEP,
    CONF_SEED,
    DEFAULT_MAX_RESAMPLES,
    DEFAULT_PRM_NEIGHBORS,
    DEFAULT_PRM_SAMPLES,
    DEFAULT_RRT_GOAL_BIAS,
    DEFAULT_RRT_MAX_ITERS,
    DEFAULT_RRT_STEP,
    DEFAULT_SEED,
    SEGMENT_CHECK_FRACTION,
)
from .exceptions import PreconditionError
from .fmm import VoxelGrid
from .grid2d import OccupancyGrid, cells_at_norm
from .planner import PlanStatus, Trajectory

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, kw_only=True, eq=False)
class CollisionSpace:
    """A box of configurations with a vectorized free-space test.

    Segments are checked by sampling points at most ``resolution`` apart.
    """

    lower: np.ndarray
    upper: np.ndarray
    is_free: Callable[[np.ndarray], np.ndarray]
    resolution: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float).reshape(-1))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float).reshape(-1))
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise PreconditionError(f"degenerate space bounds {self.lower}..{self.upper}")
        if not self.resolution > 0.0:
            raise PreconditionError("segment resolution must be positive")

    @property
    def dims(self) -> int:
        return int(self.lower.size)

    def point_free(self, point: np.ndarray) -> bool:
        return bool(self.is_free(np.asarray(point, dtype=float).reshape(1, -1))[0])

    def segment_free(self, a: np.ndarray, b: np.ndarray) -> bool:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        count = max(1, math.ceil(float(np.linalg.norm(b - a)) / self.resolution))
        t = np.linspace(0.0, 1.0, count + 1)[:, None]
        return bool(np.all(self.is_free(a + t * (b - a))))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        size = (self.dims,) if n is None else (n, self.dims)
        return rng.uniform(self.lower, self.upper, size=size)


def grid_collision_oracle(grid: OccupancyGrid) -> CollisionSpace:
    """Collision space over [-1, 1]^2: a point collides when its cell is an obstacle."""

    def is_free(points: np.ndarray) -> np.ndarray:
        rows, cols, inside = cells_at_norm(grid, points)
        return inside & grid.accessible[rows, cols]

    cell = min(2.0 / grid.width, 2.0 / grid.height)
    return CollisionSpace(
        lower=np.full(2, -1.0),
        upper=np.full(2, 1.0),
        is_free=is_free,
        resolution=SEGMENT_CHECK_FRACTION * cell,
    )


def voxel_collision_oracle(voxels: VoxelGrid) -> CollisionSpace:
    """Collision space over a voxel box in scene coordinates."""
    return CollisionSpace(
        lower=np.asarray(voxels.lower),
        upper=np.asarray(voxels.upper),
        is_free=voxels.is_free,
        resolution=SEGMENT_CHECK_FRACTION * float(voxels.voxel_size.min()),
    )


def _check_endpoints(space: CollisionSpace, start: np.ndarray, goal: np.ndarray) -> None:
    if start.shape != (space.dims,) or goal.shape != (space.dims,):
        raise PreconditionError(f"endpoints must be {space.dims}D")
    if not space.point_free(start):
        raise PreconditionError(f"start {tuple(start)} is in collision")
    if not space.point_free(goal):
        raise PreconditionError(f"goal {tuple(goal)} is in collision")


def _as_trajectory(points: list[np.ndarray], status: PlanStatus, mode: str) -> Trajectory:
    return Trajectory(
        points=[tuple(float(c) for c in p) for p in points], status=status, values=[], mode=mode
    )


@dataclass(frozen=True, kw_only=True)
class RrtConfig:
    max_iters: int = DEFAULT_RRT_MAX_ITERS
    step: float = DEFAULT_RRT_STEP
    goal_bias: float = DEFAULT_RRT_GOAL_BIAS
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        if self.max_iters < 0 or not self.step > 0.0 or not 0.0 <= self.goal_bias <= 1.0:
            raise PreconditionError(f"invalid RRT settings {self}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], **overrides: Any) -> RrtConfig:
        keys = {
            CONF_RRT_MAX_ITERS: "max_iters",
            CONF_RRT_STEP: "step",
            CONF_RRT_GOAL_BIAS: "goal_bias",
            CONF_SEED: "seed",
        }
        values = {attr: mapping[key] for key, attr in keys.items() if key in mapping}
        values.update(overrides)
        return cls(**values)


@dataclass(kw_only=True, eq=False)
class RrtTree:
    """Tree rooted at the start; ``parents[0]`` is -1."""

    nodes: np.ndarray
    parents: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.parents)

    def add(self, point: np.ndarray, parent: int) -> int:
        index = len(self.parents)
        self.nodes[index] = point
        self.parents.append(parent)
        return index

    def nearest(self, point: np.ndarray) -> int:
        distances = np.linalg.norm(self.nodes[: len(self)] - point, axis=1)
        return int(np.argmin(distances))

    def path_to(self, index: int) -> list[np.ndarray]:
        chain = []
        while index >= 0:
            chain.append(self.nodes[index].copy())
            index = self.parents[index]
        return chain[::-1]


def grow_rrt(
    space: CollisionSpace,
    start: np.ndarray,
    goal: np.ndarray,
    config: RrtConfig | None = None,
) -> tuple[RrtTree, int | None]:
    """Grow an RRT from ``start`` toward ``goal``.

    Returns:
        Tuple of (tree, index of the node that connects to the goal or None).

    Raises:
        PreconditionError: If an endpoint is in collision.
    """
    config = config or RrtConfig()
    start = np.asarray(start, dtype=float).reshape(-1)
    goal = np.asarray(goal, dtype=float).reshape(-1)
    _check_endpoints(space, start, goal)
    rng = np.random.default_rng(config.seed)
    tree = RrtTree(nodes=np.zeros((config.max_iters + 1, space.dims)))
    tree.add(start, -1)

    def connects(index: int) -> bool:
        node = tree.nodes[index]
        return float(np.linalg.norm(goal - node)) <= config.step and space.segment_free(node, goal)

    if connects(0):
        return tree, 0
    for _ in range(config.max_iters):
        target = goal if rng.random() < config.goal_bias else space.sample(rng)
        parent = tree.nearest(target)
        node = tree.nodes[parent]
        offset = target - node
        distance = float(np.linalg.norm(offset))
        if distance == 0.0:
            continue
        new = node + offset * min(1.0, config.step / distance)
        if not space.segment_free(node, new):
            continue
        index = tree.add(new, parent)
        if connects(index):
            _LOGGER.debug("RRT connected after %d nodes", len(tree))
            return tree, index
    return tree, None


def rrt_plan(
    space: CollisionSpace,
    start: np.ndarray,
    goal: np.ndarray,
    config: RrtConfig | None = None,
) -> Trajectory:
    """Plan with RRT; a failed plan ends at the tree node closest to the goal."""
    goal = np.asarray(goal, dtype=float).reshape(-1)
    tree, index = grow_rrt(space, start, goal, config)
    if index is not None:
        return _as_trajectory([*tree.path_to(index), goal], PlanStatus.REACHED_GOAL, BASELINE_RRT)
    closest = tree.nearest(goal)
    _LOGGER.debug("RRT failed with %d nodes", len(tree))
    return _as_trajectory(tree.path_to(closest), PlanStatus.FAILED, BASELINE_RRT)


@dataclass(frozen=True, kw_only=True)
class PrmConfig:
    samples: int = DEFAULT_PRM_SAMPLES
    neighbors: int = DEFAULT_PRM_NEIGHBORS
    seed: int = DEFAULT_SEED
    max_resamples: int = DEFAULT_MAX_RESAMPLES

    def __post_init__(self) -> None:
        if self.samples < 0 or self.neighbors < 1:
            raise PreconditionError(f"invalid PRM settings {self}")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], **overrides: Any) -> PrmConfig:
        keys = {
            CONF_PRM_SAMPLES: "samples",
            CONF_PRM_NEIGHBORS: "neighbors",
            CONF_SEED: "seed",
        }
        values = {attr: mapping[key] for key, attr in keys.items() if key in mapping}
        values.update(overrides)
        return cls(**values)


@dataclass(kw_only=True, eq=False)
class RoadmapGraph:
    """Roadmap nodes (start first, goal second) and their weighted graph."""

    nodes: np.ndarray
    graph: nx.Graph

    START = 0
    GOAL = 1

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in self.graph.edges(data="weight")]


def _sample_free(space: CollisionSpace, rng: np.random.Generator, config: PrmConfig) -> np.ndarray:
    found: list[np.ndarray] = []
    count = 0
    for _ in range(config.max_resamples):
        if count >= config.samples:
            break
        batch = space.sample(rng, max(config.samples - count, 16))
        batch = batch[space.is_free(batch)][: config.samples - count]
        found.append(batch)
        count += len(batch)
    if count < config.samples:
        _LOGGER.warning("PRM found only %d of %d free samples", count, config.samples)
    return np.concatenate(found) if found else np.zeros((0, space.dims))


def build_roadmap(
    space: CollisionSpace,
    start: np.ndarray,
    goal: np.ndarray,
    config: PrmConfig | None = None,
) -> RoadmapGraph:
    """Sample free configurations and link each to its k nearest neighbours.

    Raises:
        PreconditionError: If an endpoint is in collision.
    """
    config = config or PrmConfig()
    start = np.asarray(start, dtype=float).reshape(-1)
    goal = np.asarray(goal, dtype=float).reshape(-1)
    _check_endpoints(space, start, goal)
    rng = np.random.default_rng(config.seed)
    nodes = np.vstack([start, goal, _sample_free(space, rng, config)])

    graph = nx.Graph()
    graph.add_nodes_from(range(len(nodes)))
    k = min(config.neighbors + 1, len(nodes))
    _, neighbours = cKDTree(nodes).query(nodes, k=k)
    for i, row in enumerate(np.asarray(neighbours).reshape(len(nodes), k)):
        for j in row:
            j = int(j)
            if j == i or graph.has_edge(i, j):
                continue
            if space.segment_free(nodes[i], nodes[j]):
                graph.add_edge(i, j, weight=float(np.linalg.norm(nodes[i] - nodes[j])))
    _LOGGER.debug("PRM roadmap: %d nodes, %d edges", len(nodes), graph.number_of_edges())
    return RoadmapGraph(nodes=nodes, graph=graph)


def prm_plan(
    space: CollisionSpace,
    start: np.ndarray,
    goal: np.ndarray,
    config: PrmConfig | None = None,
) -> Trajectory:
    """Plan with PRM.

    Without a connection the plan ends at the reachable node closest to the goal.
    """
    roadmap = build_roadmap(space, start, goal, config)
    _, paths = nx.single_source_dijkstra(roadmap.graph, RoadmapGraph.START, weight="weight")
    if RoadmapGraph.GOAL in paths:
        path = paths[RoadmapGraph.GOAL]
        status = PlanStatus.REACHED_GOAL
    else:
        goal = np.asarray(goal, dtype=float).reshape(-1)
        reachable = sorted(paths)
        distances = np.linalg.norm(roadmap.nodes[reachable] - goal, axis=1)
        path = paths[reachable[int(np.argmin(distances))]]
        status = PlanStatus.FAILED
    return _as_trajectory([roadmap.nodes[i] for i in path], status, BASELINE_PRM)
