"""Command-line entry point: environments, oracles, training, planning, benchmarks, renders."""

from __future__ import annotations

import argparse
from collections.abc import Callable
import logging
from pathlib import Path
import sys
from typing import Any

import numpy as np
import voluptuous as vol

from . import bench, render
from .baselines import PrmConfig, RrtConfig
from .config import (
    COMMAND_BENCH,
    COMMAND_MAZE_GEN,
    COMMAND_PLAN,
    COMMAND_RENDER,
    COMMAND_SCENE_GEN,
    COMMAND_SOLVE,
    COMMAND_TRAIN,
    COMMANDS,
    RunConfig,
    cell,
    output_dir,
    parse_flags,
    point3,
    read_config_file,
    validate,
    write_config_echo,
)
from .const import (
    CONF_AFFORDANCE,
    CONF_AGENTS,
    CONF_AUGMENT_OBSTACLE_PROB,
    CONF_BASELINES,
    CONF_CONTACT_TOLERANCE,
    CONF_CONTOUR_LEVELS,
    CONF_COUNT,
    CONF_DENSITY,
    CONF_EPISODES,
    CONF_EPISODES_PER_MAZE,
    CONF_FIELD,
    CONF_FURNITURE,
    CONF_GOAL,
    CONF_GOAL_RADIUS,
    CONF_GOALS3D,
    CONF_GOALS_PER_GRID,
    CONF_HEIGHT,
    CONF_INCLUDE_OBSTACLES,
    CONF_INCLUDE_ORACLE,
    CONF_KIND,
    CONF_LOG_LEVEL,
    CONF_MAX_ITERS,
    CONF_MAX_RESAMPLES,
    CONF_MAX_STEPS,
    CONF_MAZE,
    CONF_MAZES,
    CONF_MODE,
    CONF_MODEL,
    CONF_MODELS,
    CONF_ORACLE,
    CONF_POSE,
    CONF_REGION,
    CONF_REGION_SAMPLES,
    CONF_ROOM_SIZE,
    CONF_SCALE,
    CONF_SCENE,
    CONF_SEED,
    CONF_START,
    CONF_STEP_LENGTH,
    CONF_STEP_SIZE,
    CONF_SUITE,
    CONF_TIMING_COUNTS,
    CONF_TIMING_REPEATS,
    CONF_TORSO_SAMPLES,
    CONF_TRAJECTORY,
    CONF_VARIANT,
    CONF_VOXEL_RESOLUTION,
    CONF_WALL_HEIGHT,
    CONF_WIDTH,
    DEFAULT_STEP3D_MAX_STEPS,
    DOMAIN,
    KIND_FIELD,
    KIND_FIELD3D,
    KIND_VAE,
    MODE_GRADIENT,
    MODE_GREEDY,
    MODE_MULTI,
    ORACLE_HOPS,
    POSE_SITTING,
    SEAT_HEIGHT,
    SITTING_TORSO_OFFSET,
    SUITE_3D,
    SUITE_MAZE,
    SUITE_TIMING,
    VARIANT_FIXED,
)
from .exceptions import ArityMismatchError, ConfigError, EnvFieldError
from .field import (
    FieldConfig,
    FieldModel,
    Oracle3DField,
    OracleField,
    build_dataset,
    build_dataset_3d,
    load_model,
    save_model,
    train_field,
    transformed_prediction_map,
)
from .fmm import VoxelGrid, read_field, solve, write_field
from .grid2d import GridPos, OccupancyGrid, generate_maze, read_grid, to_norm, write_grid
from .planner import (
    PoseStub,
    StepSchedule,
    Trajectory,
    gradient_descent_search,
    greedy_search,
    multi_agent_search,
    read_trajectory,
    schedule_from_poses,
    sitting_pose,
    step_search_3d,
    walking_track,
    write_trajectory,
)
from .scene3d import (
    AccessibleRegion,
    Scene3D,
    VaeConfig,
    birdseye_filter,
    generate_scene,
    read_region,
    read_scene,
    sample_accessible,
    save_vae,
    synth_torso_data,
    train_vae,
    voxelize_accessible,
    write_region,
    write_scene,
)
from .version import __version__

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2

MODEL_FILENAME = "model.ckpt"
VAE_FILENAME = "vae.ckpt"
FIELD_FILENAME = "field.txt"
SCENE_FILENAME = "scene.txt"
TORSO_FILENAME = "torso.txt"
REGION_FILENAME = "region.txt"
TRAJECTORY_FILENAME = "trajectory.txt"
HEATMAP_FILENAME = "heatmap.ppm"
CONTOURS_FILENAME = "contours.svg"
TRAJECTORY_PPM_FILENAME = "trajectory.ppm"
TRAJECTORY_SVG_FILENAME = "trajectory.svg"

COMMAND_HELP = {
    COMMAND_MAZE_GEN: "generate connected random mazes",
    COMMAND_SCENE_GEN: "generate a synthetic furnished room and torso samples",
    COMMAND_SOLVE: "solve the distance oracle of a maze for one goal",
    COMMAND_TRAIN: "train a field model or the accessible-region VAE",
    COMMAND_PLAN: "plan with a trained field or an oracle",
    COMMAND_BENCH: "run a benchmark suite and write a report",
    COMMAND_RENDER: "render a field heatmap, contours and a trajectory overlay",
}


def _parse(config: RunConfig, key: str, validator: Callable[[Any], Any]) -> Any:
    """Validate a value whose format depends on other settings."""
    try:
        return validator(config.require(key))
    except vol.Invalid as err:
        raise ConfigError(f"{key}: {err.msg}") from err


def _read_region_or_synth(config: RunConfig, scene: Scene3D) -> AccessibleRegion:
    if config.get(CONF_REGION):
        return read_region(config[CONF_REGION])
    return synth_torso_data(scene, config[CONF_TORSO_SAMPLES], config[CONF_SEED])


def _voxels(config: RunConfig, scene: Scene3D) -> VoxelGrid:
    return voxelize_accessible(
        _read_region_or_synth(config, scene), scene, config[CONF_VOXEL_RESOLUTION]
    )


def _load_2d_model(path: str) -> FieldModel:
    model = load_model(path)
    if model.spatial_dims != 2:
        raise ArityMismatchError(f"{path} holds a 3D model, a maze model is needed")
    return model


def _pose_track(config: RunConfig, count: int) -> list[PoseStub] | None:
    if not config[CONF_AFFORDANCE]:
        return None
    if config[CONF_POSE] == POSE_SITTING:
        pose = sitting_pose()
        height = SEAT_HEIGHT + SITTING_TORSO_OFFSET
        return [
            pose.placed_at((k * config[CONF_STEP_LENGTH], height, 0.0)) for k in range(count + 1)
        ]
    return walking_track(config[CONF_STEP_LENGTH], count)


def cmd_maze_gen(config: RunConfig, out: Path) -> None:
    for index in range(config[CONF_COUNT]):
        grid = generate_maze(
            config[CONF_WIDTH],
            config[CONF_HEIGHT],
            config[CONF_DENSITY],
            config[CONF_SEED] + index,
            config[CONF_MAX_RESAMPLES],
        )
        write_grid(grid, out / f"maze-{index}.txt")
    _LOGGER.info("Wrote %d mazes to %s", config[CONF_COUNT], out)


def cmd_scene_gen(config: RunConfig, out: Path) -> None:
    scene = generate_scene(
        config[CONF_SEED],
        room_size=config[CONF_ROOM_SIZE],
        furniture=config[CONF_FURNITURE],
        wall_height=config[CONF_WALL_HEIGHT],
        max_resamples=config[CONF_MAX_RESAMPLES],
    )
    write_scene(scene, out / SCENE_FILENAME)
    write_region(
        synth_torso_data(scene, config[CONF_TORSO_SAMPLES], config[CONF_SEED]),
        out / TORSO_FILENAME,
    )
    _LOGGER.info("Wrote scene with %d boxes to %s", len(scene.boxes), out)


def cmd_solve(config: RunConfig, out: Path) -> None:
    grid = read_grid(config[CONF_MAZE])
    write_field(solve(grid, config[CONF_GOAL], config[CONF_ORACLE]), out / FIELD_FILENAME)


def _train_field(config: RunConfig, out: Path) -> None:
    grids = [read_grid(path) for path in config.require(CONF_MAZES)]
    goals = None
    goals_per_grid = config[CONF_GOALS_PER_GRID]
    if CONF_GOAL in config:
        goals = [[config[CONF_GOAL]] for _ in grids]
    elif config[CONF_VARIANT] == VARIANT_FIXED:
        goals_per_grid = 1
    dataset = build_dataset(
        grids,
        oracle=config[CONF_ORACLE],
        goals_per_grid=goals_per_grid,
        include_obstacles=config[CONF_INCLUDE_OBSTACLES],
        augment_obstacle_prob=config[CONF_AUGMENT_OBSTACLE_PROB],
        seed=config[CONF_SEED],
        goals=goals,
    )
    model = train_field(dataset, FieldConfig.from_mapping(config.values))
    save_model(model, out / MODEL_FILENAME)


def _train_field3d(config: RunConfig, out: Path) -> None:
    scene = read_scene(config.require(CONF_SCENE))
    voxels = _voxels(config, scene)
    accessible = np.argwhere(voxels.accessible)
    count = 1 if config[CONF_VARIANT] == VARIANT_FIXED else config[CONF_GOALS3D]
    rng = np.random.default_rng(config[CONF_SEED])
    picks = sorted(rng.choice(len(accessible), size=min(count, len(accessible)), replace=False))
    goals = [tuple(int(i) for i in accessible[p]) for p in picks]
    dataset = build_dataset_3d(
        voxels, goals, include_obstacles=config[CONF_INCLUDE_OBSTACLES]  # type: ignore[arg-type]
    )
    model = train_field(dataset, FieldConfig.from_mapping(config.values, spatial_dims=3))
    save_model(model, out / MODEL_FILENAME)


def _train_vae(config: RunConfig, out: Path) -> None:
    scene = read_scene(config.require(CONF_SCENE))
    torso = _read_region_or_synth(config, scene)
    model = train_vae(scene, torso, VaeConfig.from_mapping(config.values))
    save_vae(model, out / VAE_FILENAME)
    samples = sample_accessible(model, scene, config[CONF_REGION_SAMPLES], config[CONF_SEED])
    region = birdseye_filter(samples, scene)
    write_region(region, out / REGION_FILENAME)
    _LOGGER.info("Kept %d of %d decoded torso locations", len(region), len(samples))


def cmd_train(config: RunConfig, out: Path) -> None:
    trainers = {KIND_FIELD: _train_field, KIND_FIELD3D: _train_field3d, KIND_VAE: _train_vae}
    trainers[config[CONF_KIND]](config, out)


def _plan_on_grid(config: RunConfig, out: Path) -> None:
    grid = read_grid(config.require(CONF_MAZE))
    model: Any = (
        _load_2d_model(config[CONF_MODEL])
        if config.get(CONF_MODEL)
        else OracleField(config[CONF_ORACLE])
    )
    mode = config[CONF_MODE]
    if mode == MODE_MULTI:
        trajectories = multi_agent_search(
            model, grid, config.require(CONF_AGENTS), config.get(CONF_MAX_STEPS)
        )
        for index, trajectory in enumerate(trajectories):
            write_trajectory(trajectory, out / f"trajectory-{index}.txt")
        _LOGGER.info(
            "Multi-agent plan: %s", ", ".join(t.status.value for t in trajectories)
        )
        return
    start = _parse(config, CONF_START, cell)
    goal = _parse(config, CONF_GOAL, cell)
    if mode == MODE_GREEDY:
        trajectory = greedy_search(model, grid, start, goal, config.get(CONF_MAX_STEPS))
    else:
        if not isinstance(model, FieldModel):
            raise ConfigError("gradient planning needs --model")
        trajectory = gradient_descent_search(
            model,
            grid,
            to_norm(grid, start),
            to_norm(grid, goal),
            step_size=config[CONF_STEP_SIZE],
            goal_radius=config[CONF_GOAL_RADIUS],
            max_iters=config[CONF_MAX_ITERS],
        )
    _finish_plan(trajectory, out)


def _plan_in_scene(config: RunConfig, out: Path) -> None:
    scene = read_scene(config.require(CONF_SCENE))
    start = _parse(config, CONF_START, point3)
    goal = _parse(config, CONF_GOAL, point3)
    if config.get(CONF_MODEL):
        model: Any = load_model(config[CONF_MODEL])
    else:
        model = Oracle3DField(_voxels(config, scene))
    max_steps = config.get(CONF_MAX_STEPS) or DEFAULT_STEP3D_MAX_STEPS
    track = _pose_track(config, max_steps)
    schedule = (
        schedule_from_poses(track)
        if track
        else StepSchedule.uniform(config[CONF_STEP_LENGTH], max_steps)
    )
    trajectory = step_search_3d(
        model,
        scene,
        start,
        goal,
        schedule,
        pose_track=track,
        max_steps=max_steps,
        tolerance=config[CONF_CONTACT_TOLERANCE],
    )
    _finish_plan(trajectory, out)


def _finish_plan(trajectory: Trajectory, out: Path) -> None:
    write_trajectory(trajectory, out / TRAJECTORY_FILENAME)
    _LOGGER.info("Plan %s after %d steps", trajectory.status.value, trajectory.steps)


def cmd_plan(config: RunConfig, out: Path) -> None:
    if config[CONF_MODE] in (MODE_GREEDY, MODE_GRADIENT, MODE_MULTI):
        _plan_on_grid(config, out)
    else:
        _plan_in_scene(config, out)


def _bench_maze(config: RunConfig) -> bench.BenchReport:
    paths = [Path(p) for p in config.require(CONF_MAZES)]
    grids = [read_grid(path) for path in paths]
    models: dict[str, Any] = {Path(p).stem: _load_2d_model(p) for p in config[CONF_MODELS]}
    if config[CONF_INCLUDE_ORACLE]:
        models["oracle"] = OracleField(ORACLE_HOPS)
    return bench.run_maze_suite(
        models,
        grids,
        episodes_per_maze=config[CONF_EPISODES_PER_MAZE],
        seed=config[CONF_SEED],
        baselines=config[CONF_BASELINES],
        rrt_config=RrtConfig.from_mapping(config.values),
        prm_config=PrmConfig.from_mapping(config.values),
        environment_ids=[path.stem for path in paths],
    )


def _bench_3d(config: RunConfig) -> bench.BenchReport:
    scene = read_scene(config.require(CONF_SCENE))
    voxels = _voxels(config, scene)
    model: Any = load_model(config[CONF_MODEL]) if config.get(CONF_MODEL) else Oracle3DField(voxels)
    episodes = bench.episode_pairs_3d(voxels, config[CONF_EPISODES], config[CONF_SEED])
    return bench.run_3d_suite(
        model,
        scene,
        voxels,
        episodes,
        baselines=config[CONF_BASELINES],
        pose_track=_pose_track(config, DEFAULT_STEP3D_MAX_STEPS),
        seed=config[CONF_SEED],
        rrt_config=RrtConfig.from_mapping(config.values, step=config[CONF_STEP_LENGTH]),
        prm_config=PrmConfig.from_mapping(config.values),
        tolerance=config[CONF_CONTACT_TOLERANCE],
    )


def _bench_timing(config: RunConfig) -> bench.BenchReport:
    model = load_model(config.require(CONF_MODEL))
    grid: OccupancyGrid | None = None
    goal: Any = np.zeros(model.spatial_dims)
    if model.spatial_dims == 2 and config.get(CONF_MAZE):
        grid = read_grid(config[CONF_MAZE])
        if CONF_GOAL in config:
            goal = to_norm(grid, config[CONF_GOAL])
    elif model.needs_grid:
        raise ConfigError(f"variant {model.variant} needs --maze for timing")
    table = bench.batched_query_timing(
        model,
        grid,
        goal,
        counts=config[CONF_TIMING_COUNTS],
        repeats=config[CONF_TIMING_REPEATS],
        seed=config[CONF_SEED],
    )
    return bench.timing_report(table, config[CONF_SEED])


def cmd_bench(config: RunConfig, out: Path) -> None:
    suites = {SUITE_MAZE: _bench_maze, SUITE_3D: _bench_3d, SUITE_TIMING: _bench_timing}
    report = suites[config[CONF_SUITE]](config)
    bench.write_report(report, out)
    if report.timing is not None:
        report.timing.check_sublinear()


def cmd_render(config: RunConfig, out: Path) -> None:
    goal: GridPos | None = config.get(CONF_GOAL)
    if config.get(CONF_FIELD):
        distance_field = read_field(config[CONF_FIELD])
        values = distance_field.transformed()
        obstacles = distance_field.obstacles
        goal = goal or distance_field.goal
    else:
        grid = read_grid(config.require(CONF_MAZE))
        model = _load_2d_model(config.require(CONF_MODEL))
        goal = config.require(CONF_GOAL)
        values = transformed_prediction_map(model, grid, goal)
        obstacles = grid.obstacles
    scale = config[CONF_SCALE]
    image = render.heatmap(values, obstacles, scale)
    render.write_ppm(image, out / HEATMAP_FILENAME)
    render.write_contours_svg(
        values, obstacles, out / CONTOURS_FILENAME, levels=config[CONF_CONTOUR_LEVELS]
    )
    if config.get(CONF_TRAJECTORY):
        trajectory = read_trajectory(config[CONF_TRAJECTORY])
        render.write_ppm(
            render.overlay_trajectory(image, trajectory, values.shape, scale, goal),
            out / TRAJECTORY_PPM_FILENAME,
        )
        render.write_contours_svg(
            values,
            obstacles,
            out / TRAJECTORY_SVG_FILENAME,
            levels=config[CONF_CONTOUR_LEVELS],
            trajectory=trajectory,
            goal=goal,
        )
    _LOGGER.info("Rendered field to %s", out)


HANDLERS: dict[str, Callable[[RunConfig, Path], None]] = {
    COMMAND_MAZE_GEN: cmd_maze_gen,
    COMMAND_SCENE_GEN: cmd_scene_gen,
    COMMAND_SOLVE: cmd_solve,
    COMMAND_TRAIN: cmd_train,
    COMMAND_PLAN: cmd_plan,
    COMMAND_BENCH: cmd_bench,
    COMMAND_RENDER: cmd_render,
}


def build_arg_parser() -> argparse.ArgumentParser:
    """Subcommand parser; per-command settings are passed as free "--key value" flags."""
    parser = argparse.ArgumentParser(
        prog=DOMAIN,
        description="Learned reaching-distance fields for path planning.",
        allow_abbrev=False,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=COMMAND_HELP[command], allow_abbrev=False)
        sub.add_argument("--config", metavar="PATH", help="file of 'key = value' lines")
    return parser


def load_run_config(argv: list[str] | None = None) -> RunConfig:
    """Resolve defaults, the config file and flags (later wins) into a RunConfig.

    Raises:
        ConfigError: If any source is unreadable or the merged values are invalid.
    """
    args, extra = build_arg_parser().parse_known_args(argv)
    file_values = read_config_file(args.config) if args.config else {}
    return validate(args.command, file_values, parse_flags(extra))


def run(config: RunConfig) -> Path:
    """Execute a validated command; returns the output directory."""
    out = output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    write_config_echo(config, out)
    HANDLERS[config.command](config, out)
    return out


def main(argv: list[str] | None = None) -> int:
    try:
        config = load_run_config(argv)
    except EnvFieldError as err:
        return _fail(err)
    logging.basicConfig(
        level=getattr(logging, config[CONF_LOG_LEVEL].upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run(config)
    except (EnvFieldError, OSError) as err:
        _LOGGER.error("%s failed: %s", config.command, err)
        return _fail(err)
    return EXIT_OK


def _fail(err: Exception) -> int:
    message = str(err).splitlines()[0] if str(err) else type(err).__name__
    print(f"{DOMAIN}: error: {message}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
