"""Implicit environment fields: datasets, the four network variants and training.

Variant A maps a query position to the field value for one fixed maze and
goal. Variant B also takes the goal coordinates. Variant C additionally takes
a convolutional context feature sampled at the query position, and variant H
evaluates a small sine network whose parameters a hypernetwork emits from the
maze.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields, replace
import logging
import math
from pathlib import Path
from typing import Any, NamedTuple, Protocol

import numpy as np
from scipy import ndimage

from . import neural
from .const import (
    CONF_BATCH_SIZE,
    CONF_ENCODER_CHANNELS,
    CONF_ENCODER_DEPTH,
    CONF_EPOCHS,
    CONF_FIELD_DEPTH,
    CONF_FIELD_WIDTH,
    CONF_HYPER_PRESET,
    CONF_LEARNING_RATE,
    CONF_OMEGA_0,
    CONF_SEED,
    CONF_VARIANT,
    DEFAULT_BATCH_SIZE,
    DEFAULT_ENCODER_CHANNELS,
    DEFAULT_ENCODER_DEPTH,
    DEFAULT_ENCODER_KERNEL,
    DEFAULT_EPOCHS,
    DEFAULT_FIELD_DEPTH,
    DEFAULT_FIELD_WIDTH,
    DEFAULT_GOALS_PER_GRID,
    DEFAULT_HYPER_PRESET,
    DEFAULT_INCLUDE_OBSTACLES,
    DEFAULT_LEARNING_RATE,
    DEFAULT_OBSTACLE_VALUE,
    DEFAULT_OMEGA_0,
    DEFAULT_ORACLE,
    DEFAULT_SEED,
    DEFAULT_VARIANT,
    GRID_VARIANTS,
    HYPER_ARCHITECTURES,
    HYPER_HEAD_SCALE,
    MODEL_MAGIC,
    MODEL_VERSION,
    ORACLE_HOPS,
    ORACLES,
    VARIANT_CONTEXT,
    VARIANT_FIXED,
    VARIANT_GOAL,
    VARIANT_HYPER,
    VARIANTS,
)
from .exceptions import (
    ArityMismatchError,
    CheckpointError,
    DivergenceError,
    EmptyDatasetError,
    GoalOnObstacleError,
    NonFiniteError,
    PreconditionError,
)
from .fmm import DistanceField, VoxelGrid, dijkstra3d_solve, solve
from .grid2d import GridPos, NormCoord, OccupancyGrid, cells_to_norm, to_norm

_LOGGER = logging.getLogger(__name__)

_CACHE_LIMIT = 256


def untransform(values: np.ndarray | float) -> np.ndarray:
    """Recover distances from transformed values; non-positive values map to inf."""
    t = np.asarray(values, dtype=float)
    positive = t > 0.0
    return np.where(positive, 1.0 / np.where(positive, t, 1.0) - 1.0, np.inf)


@dataclass(frozen=True, kw_only=True)
class FieldConfig:
    """Architecture and optimisation settings of a field model.

    ``field_depth`` counts the hidden sine layers of the field network, which
    always ends in a linear head. Hypernetwork presets count every dense layer.
    """

    variant: str = DEFAULT_VARIANT
    spatial_dims: int = 2
    field_depth: int = DEFAULT_FIELD_DEPTH
    field_width: int = DEFAULT_FIELD_WIDTH
    omega_0: float = DEFAULT_OMEGA_0
    encoder_depth: int = DEFAULT_ENCODER_DEPTH
    encoder_channels: int = DEFAULT_ENCODER_CHANNELS
    encoder_kernel: int = DEFAULT_ENCODER_KERNEL
    hyper_preset: str = DEFAULT_HYPER_PRESET
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    seed: int = DEFAULT_SEED
    obstacle_value: float = DEFAULT_OBSTACLE_VALUE

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise PreconditionError(f"unknown field variant {self.variant!r}")
        if self.spatial_dims not in (2, 3):
            raise PreconditionError(f"spatial_dims must be 2 or 3, got {self.spatial_dims}")
        if self.spatial_dims == 3 and self.variant in GRID_VARIANTS:
            raise ArityMismatchError(f"variant {self.variant} needs a 2D grid context")
        if self.hyper_preset not in HYPER_ARCHITECTURES:
            raise PreconditionError(f"unknown hypernetwork preset {self.hyper_preset!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise PreconditionError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], **overrides: Any) -> FieldConfig:
        """Build a config from a validated run configuration."""
        keys = {
            CONF_VARIANT: "variant",
            CONF_FIELD_DEPTH: "field_depth",
            CONF_FIELD_WIDTH: "field_width",
            CONF_OMEGA_0: "omega_0",
            CONF_ENCODER_DEPTH: "encoder_depth",
            CONF_ENCODER_CHANNELS: "encoder_channels",
            CONF_HYPER_PRESET: "hyper_preset",
            CONF_EPOCHS: "epochs",
            CONF_BATCH_SIZE: "batch_size",
            CONF_LEARNING_RATE: "learning_rate",
            CONF_SEED: "seed",
        }
        values = {attr: mapping[key] for key, attr in keys.items() if key in mapping}
        values.update(overrides)
        return cls(**values)


class TrainSample(NamedTuple):
    grid: OccupancyGrid | None
    goal: np.ndarray
    query: np.ndarray
    target: float


@dataclass(frozen=True, kw_only=True, eq=False)
class FieldDataset:
    """Flat arrays of (query, goal, target) samples.

    ``grid_index`` points into ``grids`` (perturbed copies from obstacle
    augmentation are appended there), or is -1 for 3D scene samples.
    """

    queries: np.ndarray
    goals: np.ndarray
    targets: np.ndarray
    grid_index: np.ndarray
    grids: tuple[OccupancyGrid, ...]
    oracle: str
    spatial_dims: int = 2
    bounds: tuple[tuple[float, ...], tuple[float, ...]] | None = None

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def sample(self, index: int) -> TrainSample:
        grid_index = int(self.grid_index[index])
        return TrainSample(
            grid=self.grids[grid_index] if grid_index >= 0 else None,
            goal=self.goals[index],
            query=self.queries[index],
            target=float(self.targets[index]),
        )

    def take(self, indices: np.ndarray) -> FieldDataset:
        """Return the samples at ``indices`` in that order."""
        return replace(
            self,
            queries=self.queries[indices],
            goals=self.goals[indices],
            targets=self.targets[indices],
            grid_index=self.grid_index[indices],
        )

    @property
    def distinct_goals(self) -> int:
        return int(np.unique(self.goals, axis=0).shape[0]) if len(self) else 0


def _grid_samples(
    grid: OccupancyGrid,
    goal: GridPos,
    oracle: str,
    include_obstacles: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    distance_field = solve(grid, goal, oracle)
    targets = distance_field.transformed().ravel()
    rows, cols = np.indices(grid.shape)
    cells = np.stack([rows.ravel(), cols.ravel()], axis=1)
    if not include_obstacles:
        keep = ~grid.obstacles.ravel()
        cells, targets = cells[keep], targets[keep]
    queries = cells_to_norm(grid, cells)
    goals = np.tile(np.asarray(to_norm(grid, goal)), (len(cells), 1))
    return queries, goals, targets


def build_dataset(
    grids: Sequence[OccupancyGrid],
    oracle: str = DEFAULT_ORACLE,
    goals_per_grid: int = DEFAULT_GOALS_PER_GRID,
    include_obstacles: bool = DEFAULT_INCLUDE_OBSTACLES,
    augment_obstacle_prob: float = 0.0,
    seed: int = DEFAULT_SEED,
    goals: Sequence[Sequence[GridPos]] | None = None,
) -> FieldDataset:
    """Label every cell of every (grid, goal) pair with its transformed distance.

    Args:
        grids: Training environments.
        oracle: Distance oracle used for the labels.
        goals_per_grid: Number of distinct goals drawn per grid when ``goals``
            is not given.
        include_obstacles: Emit obstacle cells labelled with the obstacle value.
        augment_obstacle_prob: When positive, every (grid, goal) pair is
            emitted a second time on a copy of the grid whose accessible cells
            (except the goal) turned into obstacles with this probability.
        seed: Seed for goal sampling and augmentation.
        goals: Explicit goals, one list per grid.

    Returns:
        The dataset.

    Raises:
        EmptyDatasetError: If ``grids`` is empty or a grid gets no goal.
        GoalOnObstacleError: If an explicit goal is not accessible.
    """
    if not grids:
        raise EmptyDatasetError("no grids to build a dataset from")
    if oracle not in ORACLES:
        raise PreconditionError(f"unknown oracle {oracle!r}")
    if goals is not None and len(goals) != len(grids):
        raise EmptyDatasetError(f"got goals for {len(goals)} grids, expected {len(grids)}")
    if not 0.0 <= augment_obstacle_prob < 1.0:
        raise PreconditionError(
            f"augment_obstacle_prob must lie in [0, 1), got {augment_obstacle_prob}"
        )

    rng = np.random.default_rng(seed)
    all_grids: list[OccupancyGrid] = list(grids)
    chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray, int]] = []
    for grid_index, grid in enumerate(grids):
        if goals is not None:
            grid_goals = [GridPos(int(g[0]), int(g[1])) for g in goals[grid_index]]
            for goal in grid_goals:
                if not grid.is_accessible(goal):
                    raise GoalOnObstacleError(f"training goal {tuple(goal)} is not accessible")
        else:
            free = np.flatnonzero(grid.accessible.ravel())
            picks = rng.choice(free.size, size=min(goals_per_grid, free.size), replace=False)
            grid_goals = [GridPos(*divmod(int(free[i]), grid.width)) for i in sorted(picks)]
        if not grid_goals:
            raise EmptyDatasetError(f"grid {grid_index} has no training goal")

        for goal in grid_goals:
            chunks.append((*_grid_samples(grid, goal, oracle, include_obstacles), grid_index))
            if augment_obstacle_prob > 0.0:
                flips = grid.accessible & (rng.random(grid.shape) < augment_obstacle_prob)
                flips[goal] = False
                perturbed = OccupancyGrid(grid.obstacles | flips)
                all_grids.append(perturbed)
                chunks.append(
                    (
                        *_grid_samples(perturbed, goal, oracle, include_obstacles),
                        len(all_grids) - 1,
                    )
                )

    queries = np.concatenate([c[0] for c in chunks])
    dataset = FieldDataset(
        queries=queries,
        goals=np.concatenate([c[1] for c in chunks]),
        targets=np.concatenate([c[2] for c in chunks]),
        grid_index=np.concatenate([np.full(len(c[0]), c[3]) for c in chunks]),
        grids=tuple(all_grids),
        oracle=oracle,
    )
    _LOGGER.info(
        "Built %s dataset: %d samples over %d grids", oracle, len(dataset), len(all_grids)
    )
    return dataset


def build_dataset_3d(
    voxels: VoxelGrid,
    goals: Sequence[tuple[int, int, int]],
    include_obstacles: bool = DEFAULT_INCLUDE_OBSTACLES,
    obstacle_value: float = DEFAULT_OBSTACLE_VALUE,
) -> FieldDataset:
    """Label every voxel center with its transformed voxel-Dijkstra distance.

    Inaccessible voxels are labelled ``obstacle_value``. Coordinates are
    normalized to [-1, 1]^3 by the voxel box, which the trained model keeps as
    its bounds.
    """
    if not goals:
        raise EmptyDatasetError("no goals for the 3D dataset")
    indices = np.stack(np.indices(voxels.shape), axis=-1).reshape(-1, 3)
    centers_norm = voxels.to_norm(voxels.centers(indices))
    accessible = voxels.accessible.ravel()
    chunks = []
    for goal in goals:
        distance_field = dijkstra3d_solve(voxels, goal)
        targets = distance_field.transformed(obstacle_value).ravel()
        keep = np.ones_like(accessible) if include_obstacles else accessible
        goal_norm = voxels.to_norm(voxels.centers(goal))
        chunks.append(
            (centers_norm[keep], np.tile(goal_norm, (int(keep.sum()), 1)), targets[keep])
        )
    queries = np.concatenate([c[0] for c in chunks])
    dataset = FieldDataset(
        queries=queries,
        goals=np.concatenate([c[1] for c in chunks]),
        targets=np.concatenate([c[2] for c in chunks]),
        grid_index=np.full(len(queries), -1),
        grids=(),
        oracle="dijkstra3d",
        spatial_dims=3,
        bounds=(tuple(voxels.lower), tuple(voxels.upper)),
    )
    _LOGGER.info("Built 3D dataset: %d samples for %d goals", len(dataset), len(goals))
    return dataset


def build_specs(
    config: FieldConfig, grid_shape: tuple[int, int] | None
) -> tuple[neural.NetworkSpec, neural.NetworkSpec | None]:
    """Return (field or hypo network, encoder or hypernetwork) for a config."""
    dims = config.spatial_dims
    if config.variant == VARIANT_HYPER:
        if grid_shape is None:
            raise ArityMismatchError("hypernetwork variant needs the grid shape")
        conv_layers, conv_channels, dense_layers, dense_width, hypo_layers, hypo_width = (
            HYPER_ARCHITECTURES[config.hyper_preset]
        )
        hypo = neural.mlp_spec(
            2 * dims, 1, width=hypo_width, depth=hypo_layers - 1, omega_0=config.omega_0
        )
        conv = neural.conv_stack_spec(
            grid_shape[0],
            grid_shape[1],
            1,
            channels=conv_channels,
            depth=conv_layers,
            kernel=config.encoder_kernel,
        )
        layers: list[neural.Layer] = [*conv.layers, neural.Flatten()]
        features = grid_shape[0] * grid_shape[1] * conv_channels
        for _ in range(dense_layers - 1):
            layers.append(
                neural.Dense(
                    in_features=features, out_features=dense_width, activation=neural.ACT_RELU
                )
            )
            features = dense_width
        layers.append(neural.Dense(in_features=features, out_features=neural.param_count(hypo)))
        hyper = neural.NetworkSpec(input_shape=conv.input_shape, layers=tuple(layers))
        return hypo, hyper

    in_features = {
        VARIANT_FIXED: dims,
        VARIANT_GOAL: 2 * dims,
        VARIANT_CONTEXT: 2 * dims + config.encoder_channels,
    }[config.variant]
    network = neural.mlp_spec(
        in_features,
        1,
        width=config.field_width,
        depth=config.field_depth,
        omega_0=config.omega_0,
    )
    encoder = None
    if config.variant == VARIANT_CONTEXT:
        if grid_shape is None:
            raise ArityMismatchError("context variant needs the grid shape")
        encoder = neural.conv_stack_spec(
            grid_shape[0],
            grid_shape[1],
            1,
            channels=config.encoder_channels,
            depth=config.encoder_depth,
            kernel=config.encoder_kernel,
        )
    return network, encoder


@dataclass(kw_only=True, eq=False)
class FieldModel:
    """A field network variant with its parameters and training metadata.

    For variant H, ``network`` is the hyponetwork and holds no parameters of
    its own; ``encoder`` is then the hypernetwork.
    """

    config: FieldConfig
    network: neural.NetworkSpec
    params: list[np.ndarray]
    encoder: neural.NetworkSpec | None = None
    encoder_params: list[np.ndarray] = field(default_factory=list)
    grid_shape: tuple[int, int] | None = None
    oracle: str = DEFAULT_ORACLE
    bounds: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    final_loss: float = math.nan
    loss_history: list[float] = field(default_factory=list)
    _cache: dict[OccupancyGrid, Any] = field(default_factory=dict, init=False, repr=False)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def spatial_dims(self) -> int:
        return self.config.spatial_dims

    @property
    def needs_grid(self) -> bool:
        return self.config.variant in GRID_VARIANTS

    def clear_cache(self) -> None:
        """Drop cached encoder outputs; call after changing parameters."""
        self._cache.clear()

    def trainable(self) -> list[np.ndarray]:
        return [*self.params, *self.encoder_params]

    def set_trainable(self, params: Sequence[np.ndarray]) -> None:
        count = len(self.params)
        self.params = list(params[:count])
        self.encoder_params = list(params[count:])
        self._cache.clear()

    def cell_values(
        self, grid: OccupancyGrid, goal: GridPos, cells: Sequence[GridPos]
    ) -> np.ndarray:
        """Predicted transformed values at cell centers, one batched query."""
        if not cells:
            return np.zeros(0)
        return query(self, grid, to_norm(grid, goal), cells_to_norm(grid, cells))

    def point_values(
        self, grid: OccupancyGrid | None, goal: NormCoord | np.ndarray, points: np.ndarray
    ) -> np.ndarray:
        return query(self, grid, goal, points)

    def point_gradients(
        self, grid: OccupancyGrid | None, goal: NormCoord | np.ndarray, points: np.ndarray
    ) -> np.ndarray:
        return query_gradients(self, grid, goal, points)

    def scene_values(self, goal: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Values at scene-space points of a 3D model, normalized by its bounds."""
        if self.bounds is None:
            raise ArityMismatchError("scene queries need a model trained on a 3D scene")
        return query(
            self,
            None,
            _to_unit(goal, self.bounds),
            _to_unit(np.asarray(points).reshape(-1, 3), self.bounds),
        )


def _to_unit(
    points: np.ndarray, bounds: tuple[tuple[float, ...], tuple[float, ...]]
) -> np.ndarray:
    lower = np.asarray(bounds[0])
    upper = np.asarray(bounds[1])
    return 2.0 * (np.asarray(points, dtype=float) - lower) / (upper - lower) - 1.0


def create_model(
    config: FieldConfig,
    grid_shape: tuple[int, int] | None = None,
    oracle: str = DEFAULT_ORACLE,
    bounds: tuple[tuple[float, ...], tuple[float, ...]] | None = None,
) -> FieldModel:
    """Initialize an untrained model."""
    network, encoder = build_specs(config, grid_shape)
    encoder_params: list[np.ndarray] = []
    if config.variant == VARIANT_HYPER:
        assert encoder is not None
        params: list[np.ndarray] = []
        encoder_params = neural.init_params(encoder, config.seed)
        # The head starts near a fixed, well-initialized hyponetwork.
        encoder_params[-2] = encoder_params[-2] * HYPER_HEAD_SCALE
        encoder_params[-1] = neural.flatten_params(
            neural.init_params(network, config.seed + 1)
        )
    else:
        params = neural.init_params(network, config.seed)
        if encoder is not None:
            encoder_params = neural.init_params(encoder, config.seed + 1)
    return FieldModel(
        config=config,
        network=network,
        params=params,
        encoder=encoder,
        encoder_params=encoder_params,
        grid_shape=grid_shape,
        oracle=oracle,
        bounds=bounds,
    )


def _obstacle_map(grid: OccupancyGrid) -> np.ndarray:
    return grid.obstacles.astype(float)[None, :, :, None]


def _encoder_for(model: FieldModel, grid: OccupancyGrid) -> neural.NetworkSpec:
    assert model.encoder is not None
    if model.grid_shape is not None and grid.shape != model.grid_shape:
        if model.variant == VARIANT_HYPER:
            raise ArityMismatchError(
                f"hypernetwork trained on {model.grid_shape} grids, got {grid.shape}"
            )
        _LOGGER.warning(
            "Encoder trained on %s grids is applied to a %s grid", model.grid_shape, grid.shape
        )
        return replace(model.encoder, input_shape=(grid.height, grid.width, 1))
    return model.encoder


def encode_context(model: FieldModel, grid: OccupancyGrid) -> np.ndarray:
    """Run the variant-C encoder on a grid; returns an (H, W, C) feature map.

    Results are cached per grid until ``clear_cache``.
    """
    if model.variant != VARIANT_CONTEXT:
        raise ArityMismatchError(f"variant {model.variant} has no context encoder")
    cached = model._cache.get(grid)
    if cached is None:
        features, _ = neural.forward(
            _encoder_for(model, grid), model.encoder_params, _obstacle_map(grid)
        )
        cached = features[0]
        _remember(model, grid, cached)
    return cached


def hypernet_forward(model: FieldModel, grid: OccupancyGrid) -> list[np.ndarray]:
    """Emit the hyponetwork parameters for a grid; cached per grid."""
    if model.variant != VARIANT_HYPER:
        raise ArityMismatchError(f"variant {model.variant} has no hypernetwork")
    cached = model._cache.get(grid)
    if cached is None:
        flat, _ = neural.forward(
            _encoder_for(model, grid), model.encoder_params, _obstacle_map(grid)
        )
        cached = neural.unflatten_params(model.network, flat[0])
        _remember(model, grid, cached)
    return cached


def _remember(model: FieldModel, grid: OccupancyGrid, value: Any) -> None:
    if len(model._cache) >= _CACHE_LIMIT:
        model._cache.pop(next(iter(model._cache)))
    model._cache[grid] = value


def _bilinear_setup(
    shape: tuple[int, int], points: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    height, width = shape
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    col = (pts[:, 0] + 1.0) * width / 2.0 - 0.5
    row = (pts[:, 1] + 1.0) * height / 2.0 - 0.5
    col_inside = (col >= 0.0) & (col <= width - 1)
    row_inside = (row >= 0.0) & (row <= height - 1)
    col = np.clip(col, 0.0, width - 1)
    row = np.clip(row, 0.0, height - 1)
    c0 = np.minimum(np.floor(col).astype(int), width - 2)
    r0 = np.minimum(np.floor(row).astype(int), height - 2)
    fx = col - c0
    fy = row - r0
    return r0, c0, fy, fx, row_inside, col_inside


def align_feature(feature_map: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample an (H, W, C) feature map at normalized points.

    Points outside the span of cell centers are clamped to the border.

    Returns:
        (N, C) features.
    """
    r0, c0, fy, fx, _, _ = _bilinear_setup(feature_map.shape[:2], points)
    fx = fx[:, None]
    fy = fy[:, None]
    top = (1.0 - fx) * feature_map[r0, c0] + fx * feature_map[r0, c0 + 1]
    bottom = (1.0 - fx) * feature_map[r0 + 1, c0] + fx * feature_map[r0 + 1, c0 + 1]
    return (1.0 - fy) * top + fy * bottom


def align_feature_backward(
    feature_map: np.ndarray, points: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``align_feature`` w.r.t. the feature map and the points."""
    height, width = feature_map.shape[:2]
    r0, c0, fy, fx, row_inside, col_inside = _bilinear_setup((height, width), points)
    fx_ = fx[:, None]
    fy_ = fy[:, None]
    map_grad = np.zeros_like(feature_map)
    np.add.at(map_grad, (r0, c0), (1.0 - fy_) * (1.0 - fx_) * grad)
    np.add.at(map_grad, (r0, c0 + 1), (1.0 - fy_) * fx_ * grad)
    np.add.at(map_grad, (r0 + 1, c0), fy_ * (1.0 - fx_) * grad)
    np.add.at(map_grad, (r0 + 1, c0 + 1), fy_ * fx_ * grad)

    f00 = feature_map[r0, c0]
    f01 = feature_map[r0, c0 + 1]
    f10 = feature_map[r0 + 1, c0]
    f11 = feature_map[r0 + 1, c0 + 1]
    d_col = (1.0 - fy_) * (f01 - f00) + fy_ * (f11 - f10)
    d_row = (1.0 - fx_) * (f10 - f00) + fx_ * (f11 - f01)
    point_grad = np.stack(
        [
            np.sum(d_col * grad, axis=1) * (width / 2.0) * col_inside,
            np.sum(d_row * grad, axis=1) * (height / 2.0) * row_inside,
        ],
        axis=1,
    )
    return map_grad, point_grad


def _check_query(
    model: FieldModel, grid: OccupancyGrid | None, goal: Any, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    dims = model.spatial_dims
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != dims:
        raise ArityMismatchError(f"expected (N, {dims}) query points, got {pts.shape}")
    goal_arr = np.asarray(goal, dtype=float).reshape(-1)
    if goal_arr.size != dims:
        raise ArityMismatchError(f"expected a {dims}D goal, got {goal_arr.size} values")
    if model.needs_grid and grid is None:
        raise ArityMismatchError(f"variant {model.variant} needs a grid")
    return pts, goal_arr


def _field_inputs(
    model: FieldModel, grid: OccupancyGrid | None, goal: np.ndarray, points: np.ndarray
) -> np.ndarray:
    if model.variant == VARIANT_FIXED:
        return points
    goals = np.broadcast_to(goal, points.shape)
    if model.variant == VARIANT_CONTEXT:
        assert grid is not None
        context = align_feature(encode_context(model, grid), points)
        return np.concatenate([points, goals, context], axis=1)
    return np.concatenate([points, goals], axis=1)


def _network_params(model: FieldModel, grid: OccupancyGrid | None) -> list[np.ndarray]:
    if model.variant == VARIANT_HYPER:
        assert grid is not None
        return hypernet_forward(model, grid)
    return model.params


def query(
    model: FieldModel,
    grid: OccupancyGrid | None,
    goal: NormCoord | np.ndarray,
    points: np.ndarray,
) -> np.ndarray:
    """Predict transformed field values at a batch of points.

    ``grid`` is required for variants C and H and ignored otherwise; the goal
    is ignored by variant A.

    Returns:
        (N,) predictions in the order of ``points``.

    Raises:
        ArityMismatchError: If the inputs do not fit the variant.
    """
    pts, goal_arr = _check_query(model, grid, goal, points)
    if pts.shape[0] == 0:
        return np.zeros(0)
    out, _ = neural.forward(
        model.network, _network_params(model, grid), _field_inputs(model, grid, goal_arr, pts)
    )
    return out[:, 0]


def query_gradients(
    model: FieldModel,
    grid: OccupancyGrid | None,
    goal: NormCoord | np.ndarray,
    points: np.ndarray,
) -> np.ndarray:
    """Exact gradients of the predicted value w.r.t. each query point, shape (N, D)."""
    pts, goal_arr = _check_query(model, grid, goal, points)
    dims = model.spatial_dims
    _, tape = neural.forward(
        model.network,
        _network_params(model, grid),
        _field_inputs(model, grid, goal_arr, pts),
        record=True,
    )
    assert tape is not None
    _, input_grad = neural.backward(tape, np.ones((pts.shape[0], 1)))
    grad = input_grad[:, :dims].copy()
    if model.variant == VARIANT_CONTEXT:
        assert grid is not None
        _, point_grad = align_feature_backward(
            encode_context(model, grid), pts, input_grad[:, 2 * dims :]
        )
        grad += point_grad
    return grad


def query_gradient(
    model: FieldModel,
    grid: OccupancyGrid | None,
    goal: NormCoord | np.ndarray,
    point: NormCoord | np.ndarray,
) -> np.ndarray:
    """Gradient of the predicted value w.r.t. a single query point."""
    return query_gradients(model, grid, goal, np.asarray(point, dtype=float).reshape(1, -1))[0]


def _batch_loss_and_grads(
    model: FieldModel, dataset: FieldDataset, batch: np.ndarray, with_grads: bool = True
) -> tuple[float, list[np.ndarray]]:
    """L1 loss of one batch drawn from a single grid, and gradients of every trainable array."""
    queries = dataset.queries[batch]
    targets = dataset.targets[batch][:, None]
    grid = dataset.grids[int(dataset.grid_index[batch[0]])] if model.needs_grid else None

    if model.variant == VARIANT_HYPER:
        assert grid is not None and model.encoder is not None
        flat, hyper_tape = neural.forward(
            _encoder_for(model, grid), model.encoder_params, _obstacle_map(grid), record=with_grads
        )
        hypo_params = neural.unflatten_params(model.network, flat[0])
        inputs = np.concatenate([queries, dataset.goals[batch]], axis=1)
        pred, tape = neural.forward(model.network, hypo_params, inputs, record=with_grads)
        loss = neural.l1(pred, targets)
        if not with_grads:
            return loss, []
        assert tape is not None and hyper_tape is not None
        hypo_grads, _ = neural.backward(tape, neural.l1_grad(pred, targets))
        hyper_grads, _ = neural.backward(
            hyper_tape, neural.flatten_params(hypo_grads)[None, :]
        )
        return loss, hyper_grads

    encoder_tape = None
    features = None
    if model.variant == VARIANT_CONTEXT:
        assert grid is not None
        feature_batch, encoder_tape = neural.forward(
            _encoder_for(model, grid), model.encoder_params, _obstacle_map(grid), record=with_grads
        )
        features = feature_batch[0]
        inputs = np.concatenate(
            [queries, dataset.goals[batch], align_feature(features, queries)], axis=1
        )
    elif model.variant == VARIANT_GOAL:
        inputs = np.concatenate([queries, dataset.goals[batch]], axis=1)
    else:
        inputs = queries

    pred, tape = neural.forward(model.network, model.params, inputs, record=with_grads)
    loss = neural.l1(pred, targets)
    if not with_grads:
        return loss, []
    assert tape is not None
    field_grads, input_grad = neural.backward(tape, neural.l1_grad(pred, targets))
    if encoder_tape is None:
        return loss, field_grads
    assert features is not None
    dims = model.spatial_dims
    map_grad, _ = align_feature_backward(features, queries, input_grad[:, 2 * dims :])
    encoder_grads, _ = neural.backward(encoder_tape, map_grad[None])
    return loss, [*field_grads, *encoder_grads]


def _grid_batches(
    dataset: FieldDataset, order: np.ndarray, batch_size: int, by_grid: bool
) -> list[np.ndarray]:
    if not by_grid:
        return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    batches = []
    grid_of = dataset.grid_index[order]
    for grid_index in dict.fromkeys(grid_of.tolist()):
        members = order[grid_of == grid_index]
        batches.extend(members[i : i + batch_size] for i in range(0, len(members), batch_size))
    return batches


def evaluate_loss(model: FieldModel, dataset: FieldDataset, batch_size: int | None = None) -> float:
    """Mean L1 error over the whole dataset."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    size = batch_size or model.config.batch_size
    total = 0.0
    for batch in _grid_batches(dataset, np.arange(len(dataset)), size, model.needs_grid):
        loss, _ = _batch_loss_and_grads(model, dataset, batch, with_grads=False)
        total += loss * len(batch)
    return total / len(dataset)


def _check_dataset(config: FieldConfig, dataset: FieldDataset) -> tuple[int, int] | None:
    if len(dataset) == 0:
        raise EmptyDatasetError("training dataset is empty")
    if dataset.spatial_dims != config.spatial_dims:
        raise ArityMismatchError(
            f"{dataset.spatial_dims}D dataset for a {config.spatial_dims}D model"
        )
    if config.variant == VARIANT_FIXED and dataset.distinct_goals != 1:
        raise ArityMismatchError(
            f"variant A learns one fixed goal, dataset has {dataset.distinct_goals}"
        )
    if config.variant not in GRID_VARIANTS:
        return dataset.grids[0].shape if dataset.grids else None
    if not dataset.grids:
        raise ArityMismatchError(f"variant {config.variant} needs grid samples")
    shapes = {grid.shape for grid in dataset.grids}
    if config.variant == VARIANT_HYPER and len(shapes) != 1:
        raise ArityMismatchError(f"hypernetwork needs one grid shape, got {sorted(shapes)}")
    return dataset.grids[0].shape


def train_field(
    dataset: FieldDataset,
    config: FieldConfig | None = None,
    *,
    model: FieldModel | None = None,
    shuffle: bool = True,
) -> FieldModel:
    """Fit a field model to a dataset by minimizing mean L1 error with Adam.

    Batches for variants C and H never mix grids. The returned model carries
    the per-epoch mean batch loss and a final full-dataset loss.

    Args:
        dataset: Training samples.
        config: Variant, architecture and optimisation settings.
        model: Continue training this model instead of a fresh one.
        shuffle: Reorder samples every epoch with the seeded generator.

    Raises:
        EmptyDatasetError: If the dataset is empty.
        ArityMismatchError: If the dataset does not fit the variant.
        DivergenceError: If the loss becomes non-finite.
    """
    config = config or (model.config if model is not None else FieldConfig())
    grid_shape = _check_dataset(config, dataset)
    if model is None:
        model = create_model(config, grid_shape, oracle=dataset.oracle, bounds=dataset.bounds)
    rng = np.random.default_rng(config.seed)
    adam = neural.AdamState.for_params(model.trainable(), lr=config.learning_rate)

    _LOGGER.info(
        "Training variant %s on %d samples for %d epochs",
        config.variant,
        len(dataset),
        config.epochs,
    )
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(dataset)) if shuffle else np.arange(len(dataset))
            batches = _grid_batches(dataset, order, config.batch_size, model.needs_grid)
            if shuffle and model.needs_grid:
                batches = [batches[i] for i in rng.permutation(len(batches))]
            total = 0.0
            for batch in batches:
                loss, grads = _batch_loss_and_grads(model, dataset, batch)
                if not math.isfinite(loss):
                    raise DivergenceError(f"loss became {loss} in epoch {epoch}")
                model.set_trainable(neural.adam_step(adam, model.trainable(), grads))
                total += loss * len(batch)
            model.loss_history.append(total / len(dataset))
            _LOGGER.debug("Epoch %d loss %.6f", epoch, model.loss_history[-1])
        model.final_loss = evaluate_loss(model, dataset)
    except NonFiniteError as err:
        raise DivergenceError(f"training diverged: {err}") from err
    if not math.isfinite(model.final_loss):
        raise DivergenceError(f"final loss is {model.final_loss}")
    model.clear_cache()
    _LOGGER.info("Variant %s trained, final L1 %.6f", config.variant, model.final_loss)
    return model


class CellField(Protocol):
    """Anything that scores grid cells for a goal; higher is closer."""

    def cell_values(
        self, grid: OccupancyGrid, goal: GridPos, cells: Sequence[GridPos]
    ) -> np.ndarray: ...


class OracleField:
    """Exact oracle values behind the ``CellField`` protocol.

    The oracle is re-solved for every distinct (grid, goal) it is asked
    about, so it follows grids that change during multi-agent planning.
    With ``negative`` set it scores cells by -d instead of 1 / (1 + d).
    """

    def __init__(self, oracle: str = ORACLE_HOPS, negative: bool = False) -> None:
        if oracle not in ORACLES:
            raise PreconditionError(f"unknown oracle {oracle!r}")
        self.oracle = oracle
        self.negative = negative
        self._fields: dict[tuple[OccupancyGrid, GridPos], DistanceField] = {}

    def distance_field(self, grid: OccupancyGrid, goal: GridPos) -> DistanceField:
        key = (grid, GridPos(int(goal[0]), int(goal[1])))
        cached = self._fields.get(key)
        if cached is None:
            if len(self._fields) >= _CACHE_LIMIT:
                self._fields.pop(next(iter(self._fields)))
            cached = self._fields[key] = solve(grid, goal, self.oracle)
        return cached

    def clear_cache(self) -> None:
        self._fields.clear()

    def cell_values(
        self, grid: OccupancyGrid, goal: GridPos, cells: Sequence[GridPos]
    ) -> np.ndarray:
        if not cells:
            return np.zeros(0)
        distance_field = self.distance_field(grid, goal)
        idx = np.asarray(cells, dtype=int).reshape(-1, 2)
        if self.negative:
            return -distance_field.values[idx[:, 0], idx[:, 1]]
        return distance_field.transformed()[idx[:, 0], idx[:, 1]]


class Oracle3DField:
    """Trilinearly interpolated voxel-Dijkstra values in scene space."""

    def __init__(self, voxels: VoxelGrid) -> None:
        self.voxels = voxels
        self._fields: dict[tuple[int, int, int], np.ndarray] = {}

    def goal_voxel(self, goal: np.ndarray) -> tuple[int, int, int]:
        idx, inside = self.voxels.index_of(goal)
        if not inside[0]:
            raise GoalOnObstacleError(f"goal {tuple(np.ravel(goal))} lies outside the voxel box")
        return tuple(int(i) for i in idx[0])  # type: ignore[return-value]

    def scene_values(self, goal: np.ndarray, points: np.ndarray) -> np.ndarray:
        key = self.goal_voxel(goal)
        values = self._fields.get(key)
        if values is None:
            values = self._fields[key] = dijkstra3d_solve(self.voxels, key).transformed()
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        coords = (pts - np.asarray(self.voxels.lower)) / self.voxels.voxel_size - 0.5
        return ndimage.map_coordinates(values, coords.T, order=1, mode="nearest")

    def clear_cache(self) -> None:
        self._fields.clear()


_FIELD_PARSERS = {"str": str, "int": int, "float": float}


def save_model(model: FieldModel, path: str | Path) -> None:
    """Write a model checkpoint: metadata lines then the parameter arrays."""
    metadata: dict[str, Any] = {f.name: getattr(model.config, f.name) for f in fields(FieldConfig)}
    metadata["oracle"] = model.oracle
    metadata["grid_shape"] = (
        "none" if model.grid_shape is None else " ".join(map(str, model.grid_shape))
    )
    metadata["bounds"] = (
        "none"
        if model.bounds is None
        else " ".join(repr(float(v)) for v in (*model.bounds[0], *model.bounds[1]))
    )
    metadata["final_loss"] = repr(float(model.final_loss))
    metadata["field_arrays"] = len(model.params)
    with open(path, "wb") as handle:
        neural.write_header(handle, MODEL_MAGIC, MODEL_VERSION)
        for key, value in metadata.items():
            handle.write(f"{key} {value}\n".encode("ascii"))
        handle.write(b"end\n")
        neural.dump_arrays(handle, model.trainable())


def load_model(path: str | Path) -> FieldModel:
    """Read a checkpoint written by ``save_model``.

    Raises:
        CheckpointError: If the file is malformed or its arrays do not fit.
    """
    with open(path, "rb") as handle:
        neural.read_header(handle, MODEL_MAGIC, MODEL_VERSION)
        metadata: dict[str, str] = {}
        while True:
            line = handle.readline().decode("ascii", errors="replace")
            if not line:
                raise CheckpointError("model metadata is truncated")
            if line.strip() == "end":
                break
            key, _, value = line.strip().partition(" ")
            metadata[key] = value
        arrays = neural.load_arrays(handle)

    try:
        config_values: dict[str, Any] = {}
        for f in fields(FieldConfig):
            config_values[f.name] = _FIELD_PARSERS[str(f.type)](metadata[f.name])
        config = FieldConfig(**config_values)
        grid_shape = (
            None
            if metadata["grid_shape"] == "none"
            else tuple(int(v) for v in metadata["grid_shape"].split())
        )
        bounds = None
        if metadata["bounds"] != "none":
            corners = [float(v) for v in metadata["bounds"].split()]
            half = len(corners) // 2
            bounds = (tuple(corners[:half]), tuple(corners[half:]))
        field_arrays = int(metadata["field_arrays"])
        final_loss = float(metadata["final_loss"])
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"invalid model metadata: {err}") from err

    model = create_model(
        config, grid_shape, oracle=metadata["oracle"], bounds=bounds  # type: ignore[arg-type]
    )
    expected = [a.shape for a in model.trainable()]
    if [a.shape for a in arrays] != expected or field_arrays != len(model.params):
        raise CheckpointError("checkpoint arrays do not match the model architecture")
    model.set_trainable(arrays)
    model.final_loss = final_loss
    _LOGGER.debug("Loaded variant %s model from %s", config.variant, path)
    return model


def transformed_prediction_map(model: FieldModel, grid: OccupancyGrid, goal: GridPos) -> np.ndarray:
    """Predicted values at every cell center of a grid, shape (H, W)."""
    rows, cols = np.indices(grid.shape)
    cells = np.stack([rows.ravel(), cols.ravel()], axis=1)
    values = query(model, grid, to_norm(grid, goal), cells_to_norm(grid, cells))
    return values.reshape(grid.shape)

