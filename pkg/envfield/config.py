"""Run configuration: per-command schemas, layered sources and the config echo."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
import logging
import os
from pathlib import Path
from types import MappingProxyType
from typing import Any

import voluptuous as vol

from .const import (
    BASELINES,
    CONF_AFFORDANCE,
    CONF_AGENTS,
    CONF_AUGMENT_OBSTACLE_PROB,
    CONF_BASELINES,
    CONF_BATCH_SIZE,
    CONF_CONTACT_TOLERANCE,
    CONF_CONTEXT_DIM,
    CONF_CONTOUR_LEVELS,
    CONF_COUNT,
    CONF_DENSITY,
    CONF_ENCODER_CHANNELS,
    CONF_ENCODER_DEPTH,
    CONF_EPISODES,
    CONF_EPISODES_PER_MAZE,
    CONF_EPOCHS,
    CONF_FIELD,
    CONF_FIELD_DEPTH,
    CONF_FIELD_WIDTH,
    CONF_FURNITURE,
    CONF_GOAL,
    CONF_GOAL_RADIUS,
    CONF_GOALS3D,
    CONF_GOALS_PER_GRID,
    CONF_HEIGHT,
    CONF_HYPER_PRESET,
    CONF_INCLUDE_OBSTACLES,
    CONF_INCLUDE_ORACLE,
    CONF_KIND,
    CONF_LATENT_DIM,
    CONF_LEARNING_RATE,
    CONF_LOG_LEVEL,
    CONF_MAX_ITERS,
    CONF_MAX_RESAMPLES,
    CONF_MAX_STEPS,
    CONF_MAZE,
    CONF_MAZES,
    CONF_MODE,
    CONF_MODEL,
    CONF_MODELS,
    CONF_OMEGA_0,
    CONF_ORACLE,
    CONF_OUT,
    CONF_POSE,
    CONF_PRM_NEIGHBORS,
    CONF_PRM_SAMPLES,
    CONF_REGION,
    CONF_REGION_SAMPLES,
    CONF_ROOM_SIZE,
    CONF_RRT_GOAL_BIAS,
    CONF_RRT_MAX_ITERS,
    CONF_RRT_STEP,
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
    CONF_VAE_CYCLES,
    CONF_VAE_EPOCHS,
    CONF_VARIANT,
    CONF_VOXEL_RESOLUTION,
    CONF_WALL_HEIGHT,
    CONF_WIDTH,
    CONFIG_FILENAME,
    DEFAULT_AUGMENT_OBSTACLE_PROB,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CONTACT_TOLERANCE,
    DEFAULT_CONTEXT_DIM,
    DEFAULT_CONTOUR_LEVELS,
    DEFAULT_ENCODER_CHANNELS,
    DEFAULT_ENCODER_DEPTH,
    DEFAULT_EPISODES_3D,
    DEFAULT_EPISODES_PER_MAZE,
    DEFAULT_EPOCHS,
    DEFAULT_FIELD_DEPTH,
    DEFAULT_FIELD_WIDTH,
    DEFAULT_FURNITURE,
    DEFAULT_GOAL_RADIUS,
    DEFAULT_GOALS3D,
    DEFAULT_GOALS_PER_GRID,
    DEFAULT_GRADIENT_MAX_ITERS,
    DEFAULT_HYPER_PRESET,
    DEFAULT_INCLUDE_OBSTACLES,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOG_LEVEL,
    DEFAULT_MAX_RESAMPLES,
    DEFAULT_MAZE_COUNT,
    DEFAULT_MAZE_HEIGHT,
    DEFAULT_MAZE_WIDTH,
    DEFAULT_OBSTACLE_DENSITY,
    DEFAULT_OMEGA_0,
    DEFAULT_ORACLE,
    DEFAULT_OUTPUT_ROOT,
    DEFAULT_PRM_NEIGHBORS,
    DEFAULT_PRM_SAMPLES,
    DEFAULT_REGION_SAMPLES,
    DEFAULT_RENDER_SCALE,
    DEFAULT_ROOM_SIZE,
    DEFAULT_RRT_GOAL_BIAS,
    DEFAULT_RRT_MAX_ITERS,
    DEFAULT_RRT_STEP,
    DEFAULT_SEED,
    DEFAULT_STEP_LENGTH,
    DEFAULT_STEP_SIZE,
    DEFAULT_TIMING_COUNTS,
    DEFAULT_TIMING_REPEATS,
    DEFAULT_TORSO_SAMPLES,
    DEFAULT_VAE_CYCLES,
    DEFAULT_VAE_EPOCHS,
    DEFAULT_VARIANT,
    DEFAULT_VOXEL_RESOLUTION,
    DEFAULT_WALL_HEIGHT,
    ENV_OUTPUT_ROOT,
    HYPER_PRESETS,
    KIND_FIELD,
    LOG_LEVELS,
    MODE_GREEDY,
    ORACLES,
    PLAN_MODES,
    POSE_STANDING,
    POSES,
    SUITE_MAZE,
    SUITES,
    TRAIN_KINDS,
    TRAINING_ORACLES,
    VARIANTS,
)
from .exceptions import ConfigError
from .grid2d import GridPos

_LOGGER = logging.getLogger(__name__)

COMMAND_MAZE_GEN = "maze-gen"
COMMAND_SCENE_GEN = "scene-gen"
COMMAND_SOLVE = "solve"
COMMAND_TRAIN = "train"
COMMAND_PLAN = "plan"
COMMAND_BENCH = "bench"
COMMAND_RENDER = "render"


def _split(value: Any, separator: str = ",") -> list[str]:
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [part.strip() for part in str(value).split(separator) if part.strip()]


def cell(value: Any) -> GridPos:
    """Validate a "row,col" cell."""
    if isinstance(value, (list, tuple)) and len(value) == 2:
        parts = [str(v) for v in value]
    else:
        parts = _split(value)
    try:
        row, col = (int(p) for p in parts)
    except ValueError as err:
        raise vol.Invalid(f"expected 'row,col', got {value!r}") from err
    return GridPos(row, col)


def point3(value: Any) -> tuple[float, float, float]:
    """Validate an "x,y,z" point."""
    try:
        x, y, z = (float(p) for p in _split(value))
    except ValueError as err:
        raise vol.Invalid(f"expected 'x,y,z', got {value!r}") from err
    return (x, y, z)


def positive_ints(value: Any) -> tuple[int, ...]:
    """Validate a comma-separated list of positive integers."""
    try:
        numbers = tuple(int(p) for p in _split(value))
    except ValueError as err:
        raise vol.Invalid(f"expected integers, got {value!r}") from err
    if not numbers or any(n < 1 for n in numbers):
        raise vol.Invalid(f"expected positive integers, got {value!r}")
    return numbers


def names(value: Any) -> tuple[str, ...]:
    return tuple(_split(value))


def one_of_each(options: tuple[str, ...]) -> Any:
    """Validator for a comma-separated list drawn from ``options``."""

    def validate_names(value: Any) -> tuple[str, ...]:
        chosen = names(value)
        unknown = [n for n in chosen if n not in options]
        if unknown:
            raise vol.Invalid(f"unknown choices {unknown}, expected some of {list(options)}")
        return chosen

    return validate_names


def agent_list(value: Any) -> tuple[tuple[GridPos, GridPos], ...]:
    """Validate agents written "r,c>r,c;r,c>r,c" (start>goal per agent)."""
    if isinstance(value, (list, tuple)):
        return tuple((cell(s), cell(g)) for s, g in value)
    agents = []
    for item in _split(value, ";"):
        start, sep, goal = item.partition(">")
        if not sep:
            raise vol.Invalid(f"expected 'start>goal', got {item!r}")
        agents.append((cell(start), cell(goal)))
    if not agents:
        raise vol.Invalid("at least one agent is required")
    return tuple(agents)


def _count(minimum: int = 0) -> vol.All:
    return vol.All(vol.Coerce(int), vol.Range(min=minimum))


def _real(minimum: float | None = None, maximum: float | None = None, **kwargs: bool) -> vol.All:
    return vol.All(vol.Coerce(float), vol.Range(min=minimum, max=maximum, **kwargs))


COMMON_SCHEMA = {
    vol.Optional(CONF_LOG_LEVEL, default=DEFAULT_LOG_LEVEL): vol.All(
        vol.Lower, vol.In(LOG_LEVELS)
    ),
    vol.Optional(CONF_SEED, default=DEFAULT_SEED): _count(),
    vol.Optional(CONF_OUT): str,
}

FIELD_TRAINING_SCHEMA = {
    vol.Optional(CONF_VARIANT, default=DEFAULT_VARIANT): vol.All(vol.Upper, vol.In(VARIANTS)),
    vol.Optional(CONF_ORACLE, default=DEFAULT_ORACLE): vol.In(TRAINING_ORACLES),
    vol.Optional(CONF_GOALS_PER_GRID, default=DEFAULT_GOALS_PER_GRID): _count(1),
    vol.Optional(CONF_INCLUDE_OBSTACLES, default=DEFAULT_INCLUDE_OBSTACLES): vol.Boolean(),
    vol.Optional(CONF_AUGMENT_OBSTACLE_PROB, default=DEFAULT_AUGMENT_OBSTACLE_PROB): _real(
        0.0, 1.0
    ),
    vol.Optional(CONF_EPOCHS, default=DEFAULT_EPOCHS): _count(1),
    vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): _count(1),
    vol.Optional(CONF_LEARNING_RATE, default=DEFAULT_LEARNING_RATE): _real(0.0, min_included=False),
    vol.Optional(CONF_OMEGA_0, default=DEFAULT_OMEGA_0): _real(0.0, min_included=False),
    vol.Optional(CONF_FIELD_DEPTH, default=DEFAULT_FIELD_DEPTH): _count(1),
    vol.Optional(CONF_FIELD_WIDTH, default=DEFAULT_FIELD_WIDTH): _count(1),
    vol.Optional(CONF_ENCODER_DEPTH, default=DEFAULT_ENCODER_DEPTH): _count(1),
    vol.Optional(CONF_ENCODER_CHANNELS, default=DEFAULT_ENCODER_CHANNELS): _count(1),
    vol.Optional(CONF_HYPER_PRESET, default=DEFAULT_HYPER_PRESET): vol.In(HYPER_PRESETS),
}

BASELINE_SCHEMA = {
    vol.Optional(CONF_BASELINES, default=()): one_of_each(BASELINES),
    vol.Optional(CONF_RRT_MAX_ITERS, default=DEFAULT_RRT_MAX_ITERS): _count(),
    vol.Optional(CONF_RRT_STEP, default=DEFAULT_RRT_STEP): _real(0.0, min_included=False),
    vol.Optional(CONF_RRT_GOAL_BIAS, default=DEFAULT_RRT_GOAL_BIAS): _real(0.0, 1.0),
    vol.Optional(CONF_PRM_SAMPLES, default=DEFAULT_PRM_SAMPLES): _count(),
    vol.Optional(CONF_PRM_NEIGHBORS, default=DEFAULT_PRM_NEIGHBORS): _count(1),
}

SCENE_PIPELINE_SCHEMA = {
    vol.Optional(CONF_SCENE): str,
    vol.Optional(CONF_REGION): str,
    vol.Optional(CONF_TORSO_SAMPLES, default=DEFAULT_TORSO_SAMPLES): _count(1),
    vol.Optional(CONF_VOXEL_RESOLUTION, default=DEFAULT_VOXEL_RESOLUTION): vol.All(
        positive_ints, vol.Length(min=3, max=3)
    ),
}

POSE_SCHEMA = {
    vol.Optional(CONF_POSE, default=POSE_STANDING): vol.In(POSES),
    vol.Optional(CONF_AFFORDANCE, default=False): vol.Boolean(),
    vol.Optional(CONF_STEP_LENGTH, default=DEFAULT_STEP_LENGTH): _real(0.0, min_included=False),
    vol.Optional(CONF_CONTACT_TOLERANCE, default=DEFAULT_CONTACT_TOLERANCE): _real(0.0),
}

COMMAND_SCHEMAS: dict[str, vol.Schema] = {
    COMMAND_MAZE_GEN: vol.Schema(
        {
            **COMMON_SCHEMA,
            vol.Optional(CONF_WIDTH, default=DEFAULT_MAZE_WIDTH): _count(2),
            vol.Optional(CONF_HEIGHT, default=DEFAULT_MAZE_HEIGHT): _count(2),
            vol.Optional(CONF_DENSITY, default=DEFAULT_OBSTACLE_DENSITY): _real(
                0.0, 1.0, max_included=False
            ),
            vol.Optional(CONF_COUNT, default=DEFAULT_MAZE_COUNT): _count(1),
            vol.Optional(CONF_MAX_RESAMPLES, default=DEFAULT_MAX_RESAMPLES): _count(1),
        }
    ),
    COMMAND_SCENE_GEN: vol.Schema(
        {
            **COMMON_SCHEMA,
            vol.Optional(CONF_ROOM_SIZE, default=DEFAULT_ROOM_SIZE): _real(
                0.0, min_included=False
            ),
            vol.Optional(CONF_FURNITURE, default=DEFAULT_FURNITURE): _count(),
            vol.Optional(CONF_WALL_HEIGHT, default=DEFAULT_WALL_HEIGHT): _real(
                0.0, min_included=False
            ),
            vol.Optional(CONF_TORSO_SAMPLES, default=DEFAULT_TORSO_SAMPLES): _count(1),
            vol.Optional(CONF_MAX_RESAMPLES, default=DEFAULT_MAX_RESAMPLES): _count(1),
        }
    ),
    COMMAND_SOLVE: vol.Schema(
        {
            **COMMON_SCHEMA,
            vol.Required(CONF_MAZE): str,
            vol.Required(CONF_GOAL): cell,
            vol.Optional(CONF_ORACLE, default=DEFAULT_ORACLE): vol.In(ORACLES),
        }
    ),
    COMMAND_TRAIN: vol.Schema(
        {
            **COMMON_SCHEMA,
            **FIELD_TRAINING_SCHEMA,
            **SCENE_PIPELINE_SCHEMA,
            vol.Optional(CONF_KIND, default=KIND_FIELD): vol.In(TRAIN_KINDS),
            vol.Optional(CONF_MAZES): vol.All(names, vol.Length(min=1)),
            vol.Optional(CONF_GOAL): cell,
            vol.Optional(CONF_GOALS3D, default=DEFAULT_GOALS3D): _count(1),
            vol.Optional(CONF_LATENT_DIM, default=DEFAULT_LATENT_DIM): _count(1),
            vol.Optional(CONF_CONTEXT_DIM, default=DEFAULT_CONTEXT_DIM): _count(1),
            vol.Optional(CONF_VAE_EPOCHS, default=DEFAULT_VAE_EPOCHS): _count(1),
            vol.Optional(CONF_VAE_CYCLES, default=DEFAULT_VAE_CYCLES): _count(1),
            vol.Optional(CONF_REGION_SAMPLES, default=DEFAULT_REGION_SAMPLES): _count(1),
        }
    ),
    COMMAND_PLAN: vol.Schema(
        {
            **COMMON_SCHEMA,
            **POSE_SCHEMA,
            **SCENE_PIPELINE_SCHEMA,
            vol.Optional(CONF_MODE, default=MODE_GREEDY): vol.In(PLAN_MODES),
            vol.Optional(CONF_MODEL): str,
            vol.Optional(CONF_ORACLE, default=DEFAULT_ORACLE): vol.In(ORACLES),
            vol.Optional(CONF_MAZE): str,
            vol.Optional(CONF_START): str,
            vol.Optional(CONF_GOAL): str,
            vol.Optional(CONF_AGENTS): agent_list,
            vol.Optional(CONF_MAX_STEPS): _count(),
            vol.Optional(CONF_STEP_SIZE, default=DEFAULT_STEP_SIZE): _real(
                0.0, min_included=False
            ),
            vol.Optional(CONF_GOAL_RADIUS, default=DEFAULT_GOAL_RADIUS): _real(0.0),
            vol.Optional(CONF_MAX_ITERS, default=DEFAULT_GRADIENT_MAX_ITERS): _count(),
        }
    ),
    COMMAND_BENCH: vol.Schema(
        {
            **COMMON_SCHEMA,
            **BASELINE_SCHEMA,
            **POSE_SCHEMA,
            **SCENE_PIPELINE_SCHEMA,
            vol.Optional(CONF_SUITE, default=SUITE_MAZE): vol.In(SUITES),
            vol.Optional(CONF_MODELS, default=()): names,
            vol.Optional(CONF_MODEL): str,
            vol.Optional(CONF_INCLUDE_ORACLE, default=False): vol.Boolean(),
            vol.Optional(CONF_MAZES): vol.All(names, vol.Length(min=1)),
            vol.Optional(CONF_MAZE): str,
            vol.Optional(CONF_GOAL): cell,
            vol.Optional(CONF_EPISODES_PER_MAZE, default=DEFAULT_EPISODES_PER_MAZE): _count(1),
            vol.Optional(CONF_EPISODES, default=DEFAULT_EPISODES_3D): _count(1),
            vol.Optional(CONF_TIMING_COUNTS, default=DEFAULT_TIMING_COUNTS): positive_ints,
            vol.Optional(CONF_TIMING_REPEATS, default=DEFAULT_TIMING_REPEATS): _count(1),
        }
    ),
    COMMAND_RENDER: vol.Schema(
        {
            **COMMON_SCHEMA,
            vol.Optional(CONF_FIELD): str,
            vol.Optional(CONF_MODEL): str,
            vol.Optional(CONF_MAZE): str,
            vol.Optional(CONF_GOAL): cell,
            vol.Optional(CONF_TRAJECTORY): str,
            vol.Optional(CONF_SCALE, default=DEFAULT_RENDER_SCALE): _count(1),
            vol.Optional(CONF_CONTOUR_LEVELS, default=DEFAULT_CONTOUR_LEVELS): _count(1),
        }
    ),
}

COMMANDS = tuple(COMMAND_SCHEMAS)


@dataclass(frozen=True)
class RunConfig:
    """A validated command configuration."""

    command: str
    values: Mapping[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __contains__(self, key: object) -> bool:
        return key in self.values

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def require(self, key: str) -> Any:
        """Return a value the command cannot run without.

        Raises:
            ConfigError: If the key was not given.
        """
        if key not in self.values:
            raise ConfigError(f"{self.command} needs --{key.replace('_', '-')}")
        return self.values[key]

    def to_text(self) -> str:
        """Sorted "key = value" lines that validate back to this config."""
        lines = [f"# command: {self.command}"]
        lines.extend(f"{key} = {format_value(self.values[key])}" for key in sorted(self.values))
        return "\n".join(lines) + "\n"


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and all(
            isinstance(v, (tuple, list)) and v and isinstance(v[0], (tuple, list)) for v in value
        ):
            return ";".join(">".join(format_value(p) for p in pair) for pair in value)
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse "key = value" lines; blank lines and "#" comments are skipped.

    Raises:
        ConfigError: On a line without "=" or an empty key.
    """
    values: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        values[key] = value.strip()
    return values


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err.strerror}") from err
    return parse_config_text(text, str(path))


def parse_flags(args: list[str]) -> dict[str, str]:
    """Turn "--key value" and "--key=value" arguments into a mapping.

    Raises:
        ConfigError: On a stray positional argument or a flag without a value.
    """
    values: dict[str, str] = {}
    index = 0
    while index < len(args):
        arg = args[index]
        if not arg.startswith("--") or len(arg) == 2:
            raise ConfigError(f"unexpected argument {arg!r}")
        key, sep, value = arg[2:].partition("=")
        if not sep:
            if index + 1 >= len(args):
                raise ConfigError(f"flag {arg} needs a value")
            index += 1
            value = args[index]
        values[key.replace("-", "_")] = value
        index += 1
    return values


def validate(command: str, *sources: Mapping[str, Any]) -> RunConfig:
    """Merge sources (later wins) over the command defaults and validate.

    Raises:
        ConfigError: On an unknown command, an unknown key or an invalid value.
    """
    try:
        schema = COMMAND_SCHEMAS[command]
    except KeyError as err:
        raise ConfigError(f"unknown command {command!r}") from err
    merged: dict[str, Any] = {}
    for source in sources:
        merged.update(source)
    try:
        values = schema(merged)
    except vol.MultipleInvalid as err:
        raise ConfigError(_describe(err.errors[0])) from err
    except vol.Invalid as err:
        raise ConfigError(_describe(err)) from err
    _LOGGER.debug("Validated %s configuration with %d keys", command, len(values))
    return RunConfig(command=command, values=MappingProxyType(dict(values)))


def _describe(error: vol.Invalid) -> str:
    key = ".".join(str(p) for p in error.path)
    return f"{key}: {error.msg}" if key else str(error.msg)


def output_dir(config: RunConfig) -> Path:
    """The run's output directory: --out, else $ENVFIELD_OUTPUT_ROOT/<command>."""
    if config.get(CONF_OUT):
        return Path(config[CONF_OUT])
    return Path(os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT_ROOT)) / config.command


def write_config_echo(config: RunConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / CONFIG_FILENAME
    path.write_text(config.to_text(), encoding="utf-8")
    return path
