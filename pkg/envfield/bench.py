"""Evaluation harness: maze and room suites, batched-query timing and reports."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
import statistics
import time
from typing import Any

import numpy as np

from .baselines import (
    CollisionSpace,
    PrmConfig,
    RrtConfig,
    grid_collision_oracle,
    prm_plan,
    rrt_plan,
    voxel_collision_oracle,
)
from .const import (
    BASELINE_PRM,
    BASELINE_RRT,
    BASELINES,
    DEFAULT_CONTACT_TOLERANCE,
    DEFAULT_EPISODES_3D,
    DEFAULT_EPISODES_PER_MAZE,
    DEFAULT_SEED,
    DEFAULT_STEP3D_MAX_STEPS,
    DEFAULT_STEP_LENGTH,
    DEFAULT_TIMING_COUNTS,
    DEFAULT_TIMING_REPEATS,
    DEFAULT_TRAIN_FRACTION,
    RATIO_EPSILON,
    REPORT_SCHEMA,
    SUITE_3D,
    SUITE_MAZE,
    SUITE_TIMING,
)
from .exceptions import BenchError, PreconditionError
from .field import CellField
from .fmm import VoxelGrid, bfs_hops, dijkstra3d_solve
from .grid2d import GridPos, OccupancyGrid, cells_to_norm, sample_accessible_pair
from .planner import (
    AffordanceStatus,
    PlanStatus,
    PoseStub,
    SceneField,
    StepSchedule,
    Trajectory,
    affordance_filter,
    greedy_search,
    schedule_from_poses,
    step_search_3d,
)
from .scene3d import Scene3D, scene_sdf

_LOGGER = logging.getLogger(__name__)

METHOD_FIELD = "envfield"
METHOD_FIELD_AFFORDANCE = "envfield+aff"

REPORT_FILENAME = "report.txt"
TABLE_FILENAME = "report_table.txt"

Clock = Callable[[], float]


@dataclass(frozen=True, kw_only=True)
class EpisodeResult:
    """Outcome of one planning episode.

    ``path_ratio`` compares the plan with the best possible one: optimal hop
    count for grid plans, straight-line distance for continuous plans. It is
    NaN for unsuccessful episodes.
    """

    environment: str
    start: tuple[float, ...]
    goal: tuple[float, ...]
    method: str
    status: PlanStatus
    steps: int
    wall_time: float
    final_distance: float
    path_ratio: float
    valid_fraction: float | None = None
    supported_fraction: float | None = None
    free_fraction: float | None = None

    @property
    def success(self) -> bool:
        return self.status == PlanStatus.REACHED_GOAL


@dataclass(frozen=True, kw_only=True)
class MethodSummary:
    method: str
    episodes: int
    successes: int
    mean_time: float
    mean_distance: float
    mean_ratio: float
    valid_fraction: float | None = None
    supported_fraction: float | None = None
    free_fraction: float | None = None

    @property
    def success_rate(self) -> float:
        """Percentage of successful episodes."""
        return 100.0 * self.successes / self.episodes if self.episodes else 0.0


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else math.nan


def _optional_mean(values: Sequence[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return _mean(present) if present else None


def summarize(episodes: Sequence[EpisodeResult]) -> list[MethodSummary]:
    """Aggregate episodes per method, in order of first appearance."""
    methods = list(dict.fromkeys(e.method for e in episodes))
    summaries = []
    for method in methods:
        own = [e for e in episodes if e.method == method]
        summaries.append(
            MethodSummary(
                method=method,
                episodes=len(own),
                successes=sum(e.success for e in own),
                mean_time=_mean([e.wall_time for e in own]),
                mean_distance=_mean([e.final_distance for e in own]),
                mean_ratio=_mean([e.path_ratio for e in own if e.success]),
                valid_fraction=_optional_mean([e.valid_fraction for e in own]),
                supported_fraction=_optional_mean([e.supported_fraction for e in own]),
                free_fraction=_optional_mean([e.free_fraction for e in own]),
            )
        )
    return summaries


@dataclass(kw_only=True)
class BenchReport:
    suite: str
    seed: int
    config: dict[str, Any] = field(default_factory=dict)
    episodes: list[EpisodeResult] = field(default_factory=list)
    timing: TimingTable | None = None

    @property
    def summaries(self) -> list[MethodSummary]:
        return summarize(self.episodes)

    def summary(self, method: str) -> MethodSummary:
        for summary in self.summaries:
            if summary.method == method:
                return summary
        raise KeyError(method)


def split_mazes(
    seeds: Sequence[int], train_fraction: float = DEFAULT_TRAIN_FRACTION
) -> tuple[list[int], list[int]]:
    """Split maze seeds into disjoint training and held-out lists.

    Seeds are sorted first so the split does not depend on input order; with
    two or more seeds both sides are non-empty.
    """
    if not 0.0 < train_fraction < 1.0:
        raise PreconditionError(f"train fraction must be in (0, 1), got {train_fraction}")
    ordered = sorted(dict.fromkeys(seeds))
    count = int(math.floor(len(ordered) * train_fraction))
    if len(ordered) >= 2:
        count = min(max(count, 1), len(ordered) - 1)
    return ordered[:count], ordered[count:]


def _grid_episode(
    environment: str,
    grid: OccupancyGrid,
    start: GridPos,
    goal: GridPos,
    method: str,
    trajectory: Trajectory,
    wall_time: float,
    optimal_steps: float,
) -> EpisodeResult:
    ends = cells_to_norm(grid, [trajectory.points[-1], goal])
    ratio = math.nan
    if trajectory.reached:
        ratio = trajectory.steps / optimal_steps if optimal_steps > 0 else 1.0
    return EpisodeResult(
        environment=environment,
        start=tuple(float(c) for c in start),
        goal=tuple(float(c) for c in goal),
        method=method,
        status=trajectory.status,
        steps=trajectory.steps,
        wall_time=wall_time,
        final_distance=float(np.linalg.norm(ends[0] - ends[1])),
        path_ratio=ratio,
    )


def _point_episode(
    environment: str,
    start: np.ndarray,
    goal: np.ndarray,
    method: str,
    trajectory: Trajectory,
    wall_time: float,
    validity: tuple[float, float, float] | None = None,
) -> EpisodeResult:
    straight = float(np.linalg.norm(goal - start))
    ratio = math.nan
    if trajectory.reached:
        ratio = trajectory.path_length() / straight if straight > 0 else 1.0
    valid, supported, free = validity if validity is not None else (None, None, None)
    return EpisodeResult(
        environment=environment,
        start=tuple(float(c) for c in start),
        goal=tuple(float(c) for c in goal),
        method=method,
        status=trajectory.status,
        steps=trajectory.steps,
        wall_time=wall_time,
        final_distance=float(np.linalg.norm(trajectory.as_array()[-1] - goal)),
        path_ratio=ratio,
        valid_fraction=valid,
        supported_fraction=supported,
        free_fraction=free,
    )


def _run_baseline(
    name: str,
    space: CollisionSpace,
    start: np.ndarray,
    goal: np.ndarray,
    rrt_config: RrtConfig,
    prm_config: PrmConfig,
) -> Trajectory:
    if name == BASELINE_RRT:
        return rrt_plan(space, start, goal, rrt_config)
    if name == BASELINE_PRM:
        return prm_plan(space, start, goal, prm_config)
    raise BenchError(f"unknown baseline {name!r}")


def _check_ratio(episode: EpisodeResult) -> None:
    if episode.success and episode.path_ratio < 1.0 - RATIO_EPSILON:
        raise BenchError(
            f"{episode.method} beat the optimum on {episode.environment}: "
            f"ratio {episode.path_ratio}"
        )


def run_maze_suite(
    models: Mapping[str, CellField],
    grids: Sequence[OccupancyGrid],
    episodes_per_maze: int = DEFAULT_EPISODES_PER_MAZE,
    seed: int = DEFAULT_SEED,
    baselines: Sequence[str] = (),
    rrt_config: RrtConfig | None = None,
    prm_config: PrmConfig | None = None,
    clock: Clock = time.perf_counter,
    environment_ids: Sequence[str] | None = None,
) -> BenchReport:
    """Run every method on the same random (start, goal) pairs of each maze.

    Field models plan with ``greedy_search``; baselines plan between cell
    centers in the grid's collision space. Cached encoder outputs are dropped
    before each timed episode so context encoding counts toward plan time.

    Raises:
        BenchError: If a model expects another grid shape or a plan beats the optimum.
    """
    if not models and not baselines:
        raise BenchError("nothing to benchmark")
    if environment_ids is not None and len(environment_ids) != len(grids):
        raise BenchError("one environment id per maze is required")
    for name, model in models.items():
        shape = getattr(model, "grid_shape", None)
        for grid in grids:
            if shape is not None and tuple(shape) != grid.shape:
                raise BenchError(
                    f"model {name!r} was built for {tuple(shape)} grids, maze is {grid.shape}"
                )
    unknown = set(baselines) - set(BASELINES)
    if unknown:
        raise BenchError(f"unknown baselines {sorted(unknown)}")
    rrt_config = rrt_config or RrtConfig(seed=seed)
    prm_config = prm_config or PrmConfig(seed=seed)

    report = BenchReport(
        suite=SUITE_MAZE,
        seed=seed,
        config={"episodes_per_maze": episodes_per_maze, "mazes": len(grids)},
    )
    for index, grid in enumerate(grids):
        environment = environment_ids[index] if environment_ids else f"maze-{index}"
        space = grid_collision_oracle(grid) if baselines else None
        for episode in range(episodes_per_maze):
            start, goal = sample_accessible_pair(grid, seed * 100_003 + index * 1_009 + episode)
            hops = bfs_hops(grid, goal).value_at(start)
            if not math.isfinite(hops):
                raise BenchError(f"{environment} is not connected")
            for name, model in models.items():
                clear = getattr(model, "clear_cache", None)
                if clear is not None:
                    clear()
                began = clock()
                trajectory = greedy_search(model, grid, start, goal)
                elapsed = clock() - began
                result = _grid_episode(
                    environment, grid, start, goal, name, trajectory, elapsed, hops
                )
                _check_ratio(result)
                report.episodes.append(result)
            if space is not None:
                ends = cells_to_norm(grid, [start, goal])
                for name in baselines:
                    began = clock()
                    trajectory = _run_baseline(
                        name, space, ends[0], ends[1], rrt_config, prm_config
                    )
                    elapsed = clock() - began
                    result = _point_episode(
                        environment, ends[0], ends[1], name, trajectory, elapsed
                    )
                    _check_ratio(result)
                    report.episodes.append(result)
            _LOGGER.debug("%s episode %d: %s -> %s", environment, episode, start, goal)
    _LOGGER.info("Maze suite finished: %d episodes", len(report.episodes))
    return report


def episode_pairs_3d(
    voxels: VoxelGrid, count: int = DEFAULT_EPISODES_3D, seed: int = DEFAULT_SEED
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Draw (start, goal) voxel centers that are connected through accessible voxels."""
    accessible = np.argwhere(voxels.accessible)
    if len(accessible) < 2:
        raise PreconditionError("need at least two accessible voxels")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        goal = tuple(int(i) for i in accessible[rng.integers(len(accessible))])
        values = dijkstra3d_solve(voxels, goal).values  # type: ignore[arg-type]
        reachable = np.argwhere(np.isfinite(values) & (values > 0))
        if len(reachable) == 0:
            continue
        start = reachable[rng.integers(len(reachable))]
        pairs.append((voxels.centers(start)[0], voxels.centers(goal)[0]))
    return pairs


def pose_validity(
    scene: Scene3D,
    trajectory: Trajectory,
    pose_track: Sequence[PoseStub],
    tolerance: float = DEFAULT_CONTACT_TOLERANCE,
) -> tuple[float, float, float]:
    """Fractions of steps whose pose is Valid, supported and collision-free.

    The pose for step k is taken from the track (clamped to its end) and
    placed at the k-th location after the start.
    """
    steps = trajectory.points[1:]
    if not steps:
        return 1.0, 1.0, 1.0
    valid = supported = free = 0
    for k, point in enumerate(steps, start=1):
        pose = pose_track[min(k, len(pose_track) - 1)].placed_at(point)
        status = affordance_filter(scene, pose, tolerance)
        valid += status == AffordanceStatus.VALID
        supported += status != AffordanceStatus.UNSUPPORTED
        free += _collision_free(scene, pose, tolerance)
    total = len(steps)
    return valid / total, supported / total, free / total


def _collision_free(scene: Scene3D, pose: PoseStub, tolerance: float) -> bool:
    sdf = scene_sdf(scene, pose.joints)
    mask = np.ones(len(sdf), dtype=bool)
    mask[list(pose.support_joint_indices)] = False
    return bool(np.all(sdf[mask] >= -tolerance))


def run_3d_suite(
    model: SceneField,
    scene: Scene3D,
    voxels: VoxelGrid,
    episodes: Sequence[tuple[np.ndarray, np.ndarray]],
    baselines: Sequence[str] = BASELINES,
    pose_track: Sequence[PoseStub] | None = None,
    schedule: StepSchedule | None = None,
    seed: int = DEFAULT_SEED,
    rrt_config: RrtConfig | None = None,
    prm_config: PrmConfig | None = None,
    clock: Clock = time.perf_counter,
    tolerance: float = DEFAULT_CONTACT_TOLERANCE,
) -> BenchReport:
    """Compare the 3D field planner with RRT and PRM on shared room episodes.

    With a pose track, the field planner runs twice: without and with the
    affordance filter, and every method's steps are scored for pose validity.
    """
    unknown = set(baselines) - set(BASELINES)
    if unknown:
        raise BenchError(f"unknown baselines {sorted(unknown)}")
    if schedule is None:
        schedule = (
            schedule_from_poses(pose_track)
            if pose_track
            else StepSchedule.uniform(DEFAULT_STEP_LENGTH, DEFAULT_STEP3D_MAX_STEPS)
        )
    rrt_config = rrt_config or RrtConfig(seed=seed, step=DEFAULT_STEP_LENGTH)
    prm_config = prm_config or PrmConfig(seed=seed)
    space = voxel_collision_oracle(voxels)

    runs: list[tuple[str, Sequence[PoseStub] | None]] = [(METHOD_FIELD, None)]
    if pose_track:
        runs.append((METHOD_FIELD_AFFORDANCE, pose_track))

    report = BenchReport(
        suite=SUITE_3D,
        seed=seed,
        config={"episodes": len(episodes), "schedule_steps": len(schedule)},
    )
    for index, (start, goal) in enumerate(episodes):
        start = np.asarray(start, dtype=float)
        goal = np.asarray(goal, dtype=float)
        environment = f"room-{index}"

        def validity(trajectory: Trajectory) -> tuple[float, float, float] | None:
            if not pose_track:
                return None
            return pose_validity(scene, trajectory, pose_track, tolerance)

        for name, track in runs:
            began = clock()
            trajectory = step_search_3d(
                model, scene, start, goal, schedule, pose_track=track, tolerance=tolerance
            )
            elapsed = clock() - began
            report.episodes.append(
                _point_episode(
                    environment, start, goal, name, trajectory, elapsed, validity(trajectory)
                )
            )
        for name in baselines:
            began = clock()
            trajectory = _run_baseline(name, space, start, goal, rrt_config, prm_config)
            elapsed = clock() - began
            report.episodes.append(
                _point_episode(
                    environment, start, goal, name, trajectory, elapsed, validity(trajectory)
                )
            )
    _LOGGER.info("3D suite finished: %d episodes", len(report.episodes))
    return report


@dataclass(frozen=True, kw_only=True)
class TimingTable:
    """Raw query timings per batch size; medians are what gets compared."""

    counts: tuple[int, ...]
    samples: tuple[tuple[float, ...], ...]

    @property
    def medians(self) -> tuple[float, ...]:
        return tuple(statistics.median(s) for s in self.samples)

    def median(self, count: int) -> float:
        return self.medians[self.counts.index(count)]

    def check_sublinear(self) -> None:
        """Require time(N) / time(1) < N / 2 for every measured N >= 64.

        Raises:
            BenchError: If the one-point baseline is missing or a batch is too slow.
        """
        if 1 not in self.counts:
            raise BenchError("timing table has no single-point baseline")
        base = self.median(1)
        for count, median in zip(self.counts, self.medians):
            if count >= 64 and median >= base * count / 2:
                raise BenchError(
                    f"batch of {count} took {median:.6g}s against {base:.6g}s for one point"
                )


def batched_query_timing(
    model: Any,
    grid: OccupancyGrid | None,
    goal: Sequence[float] | np.ndarray,
    counts: Sequence[int] = DEFAULT_TIMING_COUNTS,
    repeats: int = DEFAULT_TIMING_REPEATS,
    seed: int = DEFAULT_SEED,
    clock: Clock = time.perf_counter,
) -> TimingTable:
    """Time one batched ``point_values`` call per batch size.

    Query points are uniform in [-1, 1]^D. A warm-up call runs first so
    cached encoder outputs are not part of the measurement.
    """
    if repeats < 1 or not counts or any(n < 1 for n in counts):
        raise PreconditionError("timing needs positive counts and repeats")
    goal_arr = np.asarray(goal, dtype=float).reshape(-1)
    rng = np.random.default_rng(seed)
    model.point_values(grid, goal_arr, rng.uniform(-1.0, 1.0, (1, goal_arr.size)))
    samples = []
    for count in counts:
        points = rng.uniform(-1.0, 1.0, (count, goal_arr.size))
        runs = []
        for _ in range(repeats):
            began = clock()
            model.point_values(grid, goal_arr, points)
            runs.append(clock() - began)
        samples.append(tuple(runs))
        _LOGGER.debug("Batch of %d points: median %.6gs", count, statistics.median(runs))
    return TimingTable(counts=tuple(int(n) for n in counts), samples=tuple(samples))


def timing_report(table: TimingTable, seed: int = DEFAULT_SEED) -> BenchReport:
    return BenchReport(
        suite=SUITE_TIMING, seed=seed, config={"counts": len(table.counts)}, timing=table
    )


def _fmt(value: float | None) -> str:
    if value is None:
        return "none"
    return f"{value:.6f}" if math.isfinite(value) else str(value)


def report_to_text(report: BenchReport) -> str:
    """Serialize a report as "key value" lines under a schema line."""
    lines = [f"schema {REPORT_SCHEMA}", f"suite {report.suite}", f"seed {report.seed}"]
    lines.extend(f"config.{key} {report.config[key]}" for key in sorted(report.config))
    for summary in report.summaries:
        prefix = f"method.{summary.method}"
        lines.extend(
            [
                f"{prefix}.episodes {summary.episodes}",
                f"{prefix}.successes {summary.successes}",
                f"{prefix}.success_rate {_fmt(summary.success_rate)}",
                f"{prefix}.mean_time {_fmt(summary.mean_time)}",
                f"{prefix}.mean_distance {_fmt(summary.mean_distance)}",
                f"{prefix}.mean_ratio {_fmt(summary.mean_ratio)}",
                f"{prefix}.valid_fraction {_fmt(summary.valid_fraction)}",
                f"{prefix}.supported_fraction {_fmt(summary.supported_fraction)}",
                f"{prefix}.free_fraction {_fmt(summary.free_fraction)}",
            ]
        )
    for index, e in enumerate(report.episodes):
        lines.append(
            f"episode.{index} env={e.environment} method={e.method} status={e.status.value} "
            f"steps={e.steps} time={_fmt(e.wall_time)} distance={_fmt(e.final_distance)} "
            f"ratio={_fmt(e.path_ratio)}"
        )
    if report.timing is not None:
        for count, median, raw in zip(
            report.timing.counts, report.timing.medians, report.timing.samples
        ):
            lines.append(f"timing.{count}.median {_fmt(median)}")
            lines.append(f"timing.{count}.samples {' '.join(_fmt(s) for s in raw)}")
    return "\n".join(lines) + "\n"


def report_table(report: BenchReport) -> str:
    """Human-readable table of the per-method summaries."""
    if report.timing is not None:
        rows = [("points", "median_s", "ratio_to_1")]
        base = report.timing.median(1) if 1 in report.timing.counts else math.nan
        for count, median in zip(report.timing.counts, report.timing.medians):
            rows.append((str(count), f"{median:.6f}", f"{median / base:.2f}" if base else "-"))
    else:
        rows = [("method", "episodes", "success_%", "time_s", "distance", "ratio", "valid")]
        for s in report.summaries:
            rows.append(
                (
                    s.method,
                    str(s.episodes),
                    f"{s.success_rate:.2f}",
                    f"{s.mean_time:.4f}",
                    f"{s.mean_distance:.4f}",
                    f"{s.mean_ratio:.3f}",
                    "-" if s.valid_fraction is None else f"{100 * s.valid_fraction:.2f}",
                )
            )
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join(
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in rows
    ) + "\n"


def write_report(report: BenchReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.txt and report_table.txt into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / REPORT_FILENAME
    table_path = out / TABLE_FILENAME
    report_path.write_text(report_to_text(report), encoding="utf-8")
    table_path.write_text(report_table(report), encoding="utf-8")
    _LOGGER.info("Wrote %s report to %s", report.suite, out)
    return report_path, table_path
