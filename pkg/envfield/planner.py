"""Trajectory search over environment fields."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
import logging
import math
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .const import (
    DEFAULT_CONTACT_TOLERANCE,
    DEFAULT_GOAL_RADIUS,
    DEFAULT_GRADIENT_MAX_ITERS,
    DEFAULT_STEP3D_MAX_STEPS,
    DEFAULT_STEP_LENGTH,
    DEFAULT_STEP_SIZE,
    MODE_GRADIENT,
    MODE_GREEDY,
    MODE_MULTI,
    MODE_STEP3D,
    TRAJECTORY_MAGIC,
    TRAJECTORY_VERSION,
    WALKING_TORSO_HEIGHT,
)
from .exceptions import CheckpointError, GoalOnObstacleError, PreconditionError
from .field import CellField
from .fmm import voxel_offsets
from .grid2d import (
    DIRECTIONS_8,
    GridPos,
    NormCoord,
    OccupancyGrid,
    cell_at_norm,
    legal_moves,
    mark_obstacles,
)
from .scene3d import Scene3D, scene_sdf

_LOGGER = logging.getLogger(__name__)

KIND_CELL = "cell"
KIND_POINT = "point"


class PlanStatus(StrEnum):
    REACHED_GOAL = "ReachedGoal"
    STEP_BUDGET_EXCEEDED = "StepBudgetExceeded"
    STUCK = "Stuck"
    FAILED = "Failed"


@dataclass(kw_only=True, eq=False)
class Trajectory:
    """Ordered positions with the field value predicted at each of them.

    Discrete plans hold ``GridPos`` points; continuous plans hold real
    coordinate tuples (normalized in 2D, scene space in 3D).
    """

    points: list[Any]
    status: PlanStatus
    values: list[float] = field(default_factory=list)
    mode: str = MODE_GREEDY

    @property
    def steps(self) -> int:
        return len(self.points) - 1

    @property
    def kind(self) -> str:
        return KIND_CELL if self.points and isinstance(self.points[0], GridPos) else KIND_POINT

    @property
    def reached(self) -> bool:
        return self.status == PlanStatus.REACHED_GOAL

    def as_array(self) -> np.ndarray:
        return np.asarray([tuple(p) for p in self.points], dtype=float)

    def path_length(self) -> float:
        """Euclidean length of the polyline through the points."""
        if len(self.points) < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.as_array(), axis=0), axis=1)))


class PointField(Protocol):
    """A field that can be queried and differentiated at continuous 2D points."""

    def point_values(
        self, grid: OccupancyGrid | None, goal: NormCoord | np.ndarray, points: np.ndarray
    ) -> np.ndarray: ...

    def point_gradients(
        self, grid: OccupancyGrid | None, goal: NormCoord | np.ndarray, points: np.ndarray
    ) -> np.ndarray: ...


class SceneField(Protocol):
    """A field over scene-space points of a 3D room."""

    def scene_values(self, goal: np.ndarray, points: np.ndarray) -> np.ndarray: ...


def _check_endpoints(grid: OccupancyGrid, start: GridPos, goal: GridPos) -> None:
    grid.check_bounds(start)
    grid.check_bounds(goal)
    if not grid.is_accessible(goal):
        raise GoalOnObstacleError(f"goal {tuple(goal)} is an obstacle")
    if not grid.is_accessible(start):
        raise PreconditionError(f"start {tuple(start)} is an obstacle")


def _default_budget(grid: OccupancyGrid) -> int:
    return 4 * (grid.height + grid.width)


def greedy_search(
    model: CellField,
    grid: OccupancyGrid,
    start: GridPos,
    goal: GridPos,
    max_steps: int | None = None,
) -> Trajectory:
    """Walk to the best unvisited neighbour until the goal is reached.

    Each step scores every legal unvisited 8-neighbour in one batched query
    and moves to the highest transformed value; ties go to the first
    neighbour in N, NE, E, SE, S, SW, W, NW order.

    Raises:
        GoalOnObstacleError: If the goal is an obstacle.
        PreconditionError: If the start is an obstacle.
    """
    start, goal = GridPos(*start), GridPos(*goal)
    _check_endpoints(grid, start, goal)
    budget = _default_budget(grid) if max_steps is None else max_steps

    current = start
    visited = {start}
    points = [start]
    values = [float(model.cell_values(grid, goal, [start])[0])]
    status = PlanStatus.STEP_BUDGET_EXCEEDED
    for _ in range(budget):
        if current == goal:
            break
        candidates = [q for q in legal_moves(grid, current) if q not in visited]
        if not candidates:
            status = PlanStatus.STUCK
            break
        scores = model.cell_values(grid, goal, candidates)
        best = int(np.argmax(scores))
        current = candidates[best]
        visited.add(current)
        points.append(current)
        values.append(float(scores[best]))
    if current == goal:
        status = PlanStatus.REACHED_GOAL
    _LOGGER.debug("Greedy search %s -> %s: %s in %d steps", start, goal, status, len(points) - 1)
    return Trajectory(points=points, status=status, values=values, mode=MODE_GREEDY)


def _is_free(grid: OccupancyGrid, point: np.ndarray) -> bool:
    cell = cell_at_norm(grid, point)
    return cell is not None and grid.is_accessible(cell)


def gradient_descent_search(
    model: PointField,
    grid: OccupancyGrid,
    start: NormCoord | np.ndarray,
    goal: NormCoord | np.ndarray,
    step_size: float = DEFAULT_STEP_SIZE,
    goal_radius: float = DEFAULT_GOAL_RADIUS,
    max_iters: int = DEFAULT_GRADIENT_MAX_ITERS,
) -> Trajectory:
    """Follow the normalized field gradient in continuous coordinates.

    A step that lands in an obstacle is rejected and the eight compass
    directions are tried, best aligned with the gradient first.

    Raises:
        PreconditionError: If the start is not in an accessible cell.
    """
    x = np.asarray(start, dtype=float).reshape(2)
    goal_arr = np.asarray(goal, dtype=float).reshape(2)
    if not _is_free(grid, x):
        raise PreconditionError(f"start {tuple(x)} is not in an accessible cell")

    # (u, v) unit vectors of the compass directions; v follows rows.
    compass = np.array([(dc, dr) for dr, dc in DIRECTIONS_8], dtype=float)
    compass /= np.linalg.norm(compass, axis=1, keepdims=True)

    points = [x]
    status = PlanStatus.STEP_BUDGET_EXCEEDED
    for _ in range(max_iters):
        if np.linalg.norm(x - goal_arr) <= goal_radius:
            break
        gradient = np.asarray(model.point_gradients(grid, goal_arr, x[None, :]))[0]
        norm = float(np.linalg.norm(gradient))
        if not math.isfinite(norm) or norm == 0.0:
            status = PlanStatus.STUCK
            break
        direction = gradient / norm
        candidate = x + step_size * direction
        if not _is_free(grid, candidate):
            order = np.argsort(-(compass @ direction), kind="stable")
            tries = (x + step_size * compass[i] for i in order)
            candidate = next((p for p in tries if _is_free(grid, p)), None)
            if candidate is None:
                status = PlanStatus.STUCK
                break
        x = candidate
        points.append(x)
    if np.linalg.norm(x - goal_arr) <= goal_radius:
        status = PlanStatus.REACHED_GOAL

    values = model.point_values(grid, goal_arr, np.stack(points))
    return Trajectory(
        points=[tuple(float(c) for c in p) for p in points],
        status=status,
        values=[float(v) for v in values],
        mode=MODE_GRADIENT,
    )


def multi_agent_search(
    model: CellField,
    grid: OccupancyGrid,
    agents: Sequence[tuple[GridPos, GridPos]],
    max_steps: int | None = None,
) -> list[Trajectory]:
    """Plan several agents that treat each other as moving obstacles.

    Every timestep, agents act in order. Agent i sees the grid with every
    other agent's current cell marked as an obstacle and takes one greedy
    step on it. An agent whose goal is occupied, or whose only legal
    unvisited moves are blocked by other agents, waits in place and forgets
    its visited cells. An agent with no legal unvisited move even on the
    bare grid is Stuck, as in ``greedy_search``. Agents at their goal or
    Stuck stay where they are and block the others.

    Raises:
        PreconditionError: If an endpoint is an obstacle or two starts coincide.
    """
    agents = [(GridPos(*s), GridPos(*g)) for s, g in agents]
    for start, goal in agents:
        _check_endpoints(grid, start, goal)
    starts = [start for start, _ in agents]
    if len(set(starts)) != len(starts):
        raise PreconditionError("agent starts must be pairwise distinct")
    budget = _default_budget(grid) if max_steps is None else max_steps

    positions = list(starts)
    stuck = [False] * len(agents)
    visited = [{start} for start in starts]
    points: list[list[GridPos]] = [[start] for start in starts]
    values: list[list[float]] = [
        [float(model.cell_values(grid, goal, [start])[0])] for start, goal in agents
    ]
    for _ in range(budget):
        if all(stuck[i] or positions[i] == goal for i, (_, goal) in enumerate(agents)):
            break
        for i, (_, goal) in enumerate(agents):
            if stuck[i] or positions[i] == goal:
                continue
            if not any(q not in visited[i] for q in legal_moves(grid, positions[i])):
                stuck[i] = True
                continue
            others = [p for j, p in enumerate(positions) if j != i]
            if goal in others:
                move = None
            else:
                local = mark_obstacles(grid, others)
                candidates = [q for q in legal_moves(local, positions[i]) if q not in visited[i]]
                move = None
                if candidates:
                    scores = model.cell_values(local, goal, candidates)
                    best = int(np.argmax(scores))
                    move = (candidates[best], float(scores[best]))
            if move is None:
                visited[i] = {positions[i]}
                points[i].append(positions[i])
                values[i].append(values[i][-1])
                continue
            positions[i] = move[0]
            visited[i].add(move[0])
            points[i].append(move[0])
            values[i].append(move[1])

    trajectories = []
    for i, (_, goal) in enumerate(agents):
        if positions[i] == goal:
            status = PlanStatus.REACHED_GOAL
        elif stuck[i]:
            status = PlanStatus.STUCK
        else:
            status = PlanStatus.STEP_BUDGET_EXCEEDED
        trajectories.append(
            Trajectory(points=points[i], status=status, values=values[i], mode=MODE_MULTI)
        )
    _LOGGER.info(
        "Multi-agent search: %d of %d agents reached their goal",
        sum(t.reached for t in trajectories),
        len(trajectories),
    )
    return trajectories


def positions_at(trajectories: Sequence[Trajectory], timestep: int) -> list[Any]:
    """Where each agent is at ``timestep``; finished agents stay at their last point."""
    return [t.points[min(timestep, len(t.points) - 1)] for t in trajectories]


@dataclass(frozen=True, kw_only=True, eq=False)
class PoseStub:
    """Body joints with the supporting subset used for affordance checks."""

    joints: np.ndarray
    support_joint_indices: tuple[int, ...]
    torso_index: int = 0

    def __post_init__(self) -> None:
        joints = np.array(self.joints, dtype=float).reshape(-1, 3)
        joints.setflags(write=False)
        object.__setattr__(self, "joints", joints)
        object.__setattr__(self, "support_joint_indices", tuple(self.support_joint_indices))
        count = len(joints)
        if count < 2:
            raise PreconditionError("a pose needs at least two joints")
        indices = (*self.support_joint_indices, self.torso_index)
        if any(not 0 <= i < count for i in indices):
            raise PreconditionError(f"joint index out of range for {count} joints")
        if not np.all(np.isfinite(joints)):
            raise PreconditionError("pose joints must be finite")

    @property
    def torso(self) -> np.ndarray:
        return self.joints[self.torso_index]

    def offsets(self) -> np.ndarray:
        """Joint positions relative to the torso."""
        return self.joints - self.torso

    def placed_at(self, location: np.ndarray | Sequence[float]) -> PoseStub:
        """Translate the pose so its torso sits at ``location``."""
        return PoseStub(
            joints=self.offsets() + np.asarray(location, dtype=float).reshape(3),
            support_joint_indices=self.support_joint_indices,
            torso_index=self.torso_index,
        )


def standing_pose() -> PoseStub:
    """Upright body with the torso at the origin; the feet carry it."""
    joints = [
        (0.0, 0.0, 0.0),  # torso
        (0.0, 0.5, 0.0),  # head
        (-0.25, -0.2, 0.0),  # hands
        (0.25, -0.2, 0.0),
        (-0.1, -0.45, 0.0),  # knees
        (0.1, -0.45, 0.0),
        (-0.1, -WALKING_TORSO_HEIGHT, 0.0),  # feet
        (0.1, -WALKING_TORSO_HEIGHT, 0.0),
    ]
    return PoseStub(joints=joints, support_joint_indices=(6, 7), torso_index=0)


def sitting_pose() -> PoseStub:
    """Seated body; the hip and both laps rest on the seat."""
    joints = [
        (0.0, 0.0, 0.0),  # torso
        (0.0, 0.5, 0.0),  # head
        (0.0, -0.15, 0.0),  # hip
        (-0.1, -0.15, 0.1),  # laps
        (0.1, -0.15, 0.1),
        (-0.3, 0.0, 0.0),  # hands
        (0.3, 0.0, 0.0),
    ]
    return PoseStub(joints=joints, support_joint_indices=(2, 3, 4), torso_index=0)


class AffordanceStatus(StrEnum):
    VALID = "Valid"
    UNSUPPORTED = "Unsupported"
    COLLIDING = "Colliding"


def affordance_filter(
    scene: Scene3D, pose: PoseStub, tolerance: float = DEFAULT_CONTACT_TOLERANCE
) -> AffordanceStatus:
    """Check a placed pose against the scene.

    Support joints must touch or penetrate geometry (SDF <= tolerance); every
    other joint must stay out of it (SDF >= -tolerance).
    """
    sdf = scene_sdf(scene, pose.joints)
    support = np.zeros(len(sdf), dtype=bool)
    support[list(pose.support_joint_indices)] = True
    if np.any(sdf[support] > tolerance):
        return AffordanceStatus.UNSUPPORTED
    if np.any(sdf[~support] < -tolerance):
        return AffordanceStatus.COLLIDING
    return AffordanceStatus.VALID


def affordance_mask(
    scene: Scene3D,
    pose: PoseStub,
    locations: np.ndarray,
    tolerance: float = DEFAULT_CONTACT_TOLERANCE,
) -> np.ndarray:
    """Vectorized ``affordance_filter``: True where the pose placed there is Valid."""
    locs = np.asarray(locations, dtype=float).reshape(-1, 3)
    offsets = pose.offsets()
    placed = locs[:, None, :] + offsets[None, :, :]
    sdf = scene_sdf(scene, placed.reshape(-1, 3)).reshape(len(locs), len(offsets))
    support = np.zeros(len(offsets), dtype=bool)
    support[list(pose.support_joint_indices)] = True
    supported = np.all(sdf[:, support] <= tolerance, axis=1)
    free = np.all(sdf[:, ~support] >= -tolerance, axis=1)
    return supported & free


@dataclass(frozen=True)
class StepSchedule:
    lengths: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lengths", tuple(float(s) for s in self.lengths))
        if any(not s > 0.0 for s in self.lengths):
            raise PreconditionError("step lengths must be positive")

    def __len__(self) -> int:
        return len(self.lengths)

    @classmethod
    def uniform(cls, step_length: float, count: int) -> StepSchedule:
        return cls((step_length,) * count)


def schedule_from_poses(track: Sequence[PoseStub]) -> StepSchedule:
    """Step lengths from the distances between adjacent torso locations."""
    torsos = np.stack([pose.torso for pose in track]) if track else np.zeros((0, 3))
    return StepSchedule(tuple(np.linalg.norm(np.diff(torsos, axis=0), axis=1)))


def walking_track(
    step_length: float = DEFAULT_STEP_LENGTH, count: int = DEFAULT_STEP3D_MAX_STEPS
) -> list[PoseStub]:
    """``count`` + 1 standing poses spaced ``step_length`` apart along x."""
    pose = standing_pose()
    return [
        pose.placed_at((k * step_length, WALKING_TORSO_HEIGHT, 0.0)) for k in range(count + 1)
    ]


def _unit_directions() -> np.ndarray:
    offsets = np.asarray(voxel_offsets(), dtype=float)
    return offsets / np.linalg.norm(offsets, axis=1, keepdims=True)


def step_search_3d(
    model: SceneField,
    scene: Scene3D,
    start: np.ndarray | Sequence[float],
    goal: np.ndarray | Sequence[float],
    schedule: StepSchedule,
    pose_track: Sequence[PoseStub] | None = None,
    max_steps: int = DEFAULT_STEP3D_MAX_STEPS,
    tolerance: float = DEFAULT_CONTACT_TOLERANCE,
) -> Trajectory:
    """Step through a room along the best of 26 directions.

    Step k moves by ``schedule.lengths[k]``. Candidates must stay in the room
    and keep half a step away from earlier locations; with a pose track the
    pose for the step must also be Valid at the candidate, the goal included.
    The search ends on the goal once it is within one step length.

    Only the room bounds are checked for the endpoints. Whether they lie in
    the accessible region, and whether the start pose is Valid, is up to the
    caller; the first point of the trajectory is the start as given.

    Raises:
        PreconditionError: If the schedule is empty or an endpoint is outside the room.
    """
    if len(schedule) == 0:
        raise PreconditionError("empty step schedule")
    x = np.asarray(start, dtype=float).reshape(3)
    goal_arr = np.asarray(goal, dtype=float).reshape(3)
    if not scene.contains(np.stack([x, goal_arr])).all():
        raise PreconditionError("start and goal must lie inside the room")

    directions = _unit_directions()
    points = [x]
    status = PlanStatus.STEP_BUDGET_EXCEEDED
    for k in range(min(len(schedule), max_steps)):
        distance = float(np.linalg.norm(goal_arr - x))
        if distance == 0.0:
            break
        step = schedule.lengths[k]
        pose = pose_track[min(k + 1, len(pose_track) - 1)] if pose_track else None
        if distance <= step and (
            pose is None or affordance_mask(scene, pose, goal_arr[None], tolerance)[0]
        ):
            x = goal_arr
            points.append(x)
            break
        candidates = x + step * directions
        keep = scene.contains(candidates)
        visited = np.stack(points)
        nearest = np.min(
            np.linalg.norm(candidates[:, None, :] - visited[None, :, :], axis=2), axis=1
        )
        keep &= nearest >= 0.5 * step
        if pose is not None:
            keep &= affordance_mask(scene, pose, candidates, tolerance)
        if not keep.any():
            status = PlanStatus.STUCK
            break
        options = candidates[keep]
        x = options[int(np.argmax(model.scene_values(goal_arr, options)))]
        points.append(x)
    if np.array_equal(x, goal_arr):
        status = PlanStatus.REACHED_GOAL

    values = model.scene_values(goal_arr, np.stack(points))
    _LOGGER.debug("3D search finished %s after %d steps", status, len(points) - 1)
    return Trajectory(
        points=[tuple(float(c) for c in p) for p in points],
        status=status,
        values=[float(v) for v in values],
        mode=MODE_STEP3D,
    )


def trajectory_to_text(trajectory: Trajectory) -> str:
    """Serialize a trajectory.

    A header of "key value" lines (mode, status, steps, kind, dims) follows
    the magic line; then one line per point: coordinates and predicted value.
    """
    dims = len(trajectory.points[0]) if trajectory.points else 0
    missing = len(trajectory.points) - len(trajectory.values)
    values = list(trajectory.values) + [math.nan] * missing
    lines = [
        f"{TRAJECTORY_MAGIC} {TRAJECTORY_VERSION}",
        f"mode {trajectory.mode}",
        f"status {trajectory.status.value}",
        f"steps {trajectory.steps}",
        f"kind {trajectory.kind}",
        f"dims {dims}",
    ]
    for point, value in zip(trajectory.points, values):
        if trajectory.kind == KIND_CELL:
            coords = [str(int(c)) for c in point]
        else:
            coords = [repr(float(c)) for c in point]
        lines.append(" ".join([*coords, repr(float(value))]))
    return "\n".join(lines) + "\n"


def trajectory_from_text(text: str) -> Trajectory:
    lines = text.splitlines()
    try:
        if lines[0].split() != [TRAJECTORY_MAGIC, str(TRAJECTORY_VERSION)]:
            raise ValueError("bad trajectory header")
        header = dict(line.split(maxsplit=1) for line in lines[1:6])
        steps = int(header["steps"])
        dims = int(header["dims"])
        kind = header["kind"]
        points: list[Any] = []
        values = []
        for line in lines[6 : 6 + steps + 1]:
            tokens = line.split()
            if len(tokens) != dims + 1:
                raise ValueError(f"bad trajectory point {line!r}")
            if kind == KIND_CELL:
                points.append(GridPos(int(tokens[0]), int(tokens[1])))
            else:
                points.append(tuple(float(t) for t in tokens[:dims]))
            values.append(float(tokens[dims]))
        if len(points) != steps + 1:
            raise ValueError("trajectory is truncated")
        return Trajectory(
            points=points, status=PlanStatus(header["status"]), values=values, mode=header["mode"]
        )
    except (IndexError, KeyError, ValueError) as err:
        raise CheckpointError(f"invalid trajectory: {err}") from err


def write_trajectory(trajectory: Trajectory, path: str | Path) -> None:
    Path(path).write_text(trajectory_to_text(trajectory), encoding="utf-8")


def read_trajectory(path: str | Path) -> Trajectory:
    return trajectory_from_text(Path(path).read_text(encoding="utf-8"))
