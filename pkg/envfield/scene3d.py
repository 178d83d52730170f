"""Synthetic 3D rooms, accessible torso regions and the region-generating VAE."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, fields
from enum import StrEnum
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
from scipy import ndimage

from . import neural
from .const import (
    CONF_CONTEXT_DIM,
    CONF_LATENT_DIM,
    CONF_SEED,
    CONF_VAE_CYCLES,
    CONF_VAE_EPOCHS,
    DEFAULT_BIRDSEYE_RESOLUTION,
    DEFAULT_CLOUD_SIZE,
    DEFAULT_CONTEXT_DIM,
    DEFAULT_FURNITURE,
    DEFAULT_LATENT_DIM,
    DEFAULT_MAX_RESAMPLES,
    DEFAULT_POINT_ENCODER_DEPTH,
    DEFAULT_ROOM_SIZE,
    DEFAULT_SEED,
    DEFAULT_VAE_BATCH_SIZE,
    DEFAULT_VAE_CYCLES,
    DEFAULT_VAE_EPOCHS,
    DEFAULT_VAE_HIDDEN,
    DEFAULT_VAE_LEARNING_RATE,
    DEFAULT_VAE_RECON_WEIGHT,
    DEFAULT_WALL_HEIGHT,
    FURNITURE_GAP,
    FURNITURE_HEIGHT_RANGE,
    FURNITURE_SIZE_RANGE,
    REGION_MAGIC,
    SCENE_MAGIC,
    SEAT_FRACTION,
    SEAT_HEIGHT,
    SEAT_MARGIN,
    SITTING_TORSO_OFFSET,
    TORSO_HEIGHT_JITTER,
    VAE_MAGIC,
    VAE_VERSION,
    WALKING_TORSO_HEIGHT,
    WALL_MARGIN,
)
from .exceptions import (
    CheckpointError,
    DegenerateSceneError,
    DivergenceError,
    EmptyDatasetError,
    EmptyRegionError,
    ImpossibleConfigurationError,
    NonFiniteError,
    PreconditionError,
)
from .fmm import VoxelGrid
from .grid2d import OccupancyGrid, is_connected

_LOGGER = logging.getLogger(__name__)

SURFACE_TOLERANCE = 1e-9
SCENE_VERSION = 1
REGION_VERSION = 1


@dataclass(frozen=True, kw_only=True)
class Box:
    """Axis-aligned solid; ``seat`` marks furniture people may sit on."""

    lower: tuple[float, float, float]
    upper: tuple[float, float, float]
    seat: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if len(self.lower) != 3 or len(self.upper) != 3:
            raise DegenerateSceneError("box corners must be 3D")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise DegenerateSceneError(f"box min {self.lower} not below max {self.upper}")

    @property
    def top(self) -> float:
        return self.upper[1]

    def footprint_contains(self, xz: np.ndarray) -> np.ndarray:
        """Whether (N, 2) floor coordinates lie in the box footprint (closed)."""
        pts = np.asarray(xz, dtype=float).reshape(-1, 2)
        return (
            (pts[:, 0] >= self.lower[0])
            & (pts[:, 0] <= self.upper[0])
            & (pts[:, 1] >= self.lower[2])
            & (pts[:, 1] <= self.upper[2])
        )

    def sdf(self, points: np.ndarray) -> np.ndarray:
        """Exact signed distance, negative inside."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        q = np.abs(pts - (lower + upper) / 2.0) - (upper - lower) / 2.0
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside


@dataclass(frozen=True, kw_only=True)
class Scene3D:
    """A room: floor at y = 0 over an x/z extent, implied walls and boxes."""

    x_range: tuple[float, float]
    z_range: tuple[float, float]
    wall_height: float = DEFAULT_WALL_HEIGHT
    boxes: tuple[Box, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        (x0, x1), (z0, z1) = self.x_range, self.z_range
        if not (x0 < x1 and z0 < z1 and self.wall_height > 0.0):
            raise DegenerateSceneError(
                f"degenerate room extent x={self.x_range} z={self.z_range} "
                f"height={self.wall_height}"
            )
        for box in self.boxes:
            if (
                box.lower[0] < x0
                or box.upper[0] > x1
                or box.lower[2] < z0
                or box.upper[2] > z1
                or box.lower[1] < 0.0
                or box.upper[1] > self.wall_height
            ):
                raise DegenerateSceneError(f"box {box} leaves the room")

    @property
    def lower(self) -> tuple[float, float, float]:
        return (self.x_range[0], 0.0, self.z_range[0])

    @property
    def upper(self) -> tuple[float, float, float]:
        return (self.x_range[1], self.wall_height, self.z_range[1])

    @property
    def seats(self) -> list[Box]:
        return [box for box in self.boxes if box.seat]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Whether points lie inside the room volume (walls and floor included)."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((pts >= np.asarray(self.lower)) & (pts <= np.asarray(self.upper)), axis=1)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        return scene_sdf(self, points)


def scene_sdf(scene: Scene3D, points: np.ndarray) -> np.ndarray:
    """Signed distance to the scene's solids: floor, walls and boxes.

    Negative inside solid geometry (below the floor, beyond a wall, inside a
    box), positive in free air and zero on surfaces.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    (x0, x1), (z0, z1) = scene.x_range, scene.z_range
    distances = [
        pts[:, 1],
        pts[:, 0] - x0,
        x1 - pts[:, 0],
        pts[:, 2] - z0,
        z1 - pts[:, 2],
    ]
    distances.extend(box.sdf(pts) for box in scene.boxes)
    return np.min(np.stack(distances), axis=0)


def _surface_faces(scene: Scene3D) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Rectangles (origin, u, v) covering every exposed surface."""
    (x0, x1), (z0, z1) = scene.x_range, scene.z_range
    height = scene.wall_height
    lx, lz = x1 - x0, z1 - z0
    faces = [
        ((x0, 0.0, z0), (lx, 0.0, 0.0), (0.0, 0.0, lz)),
        ((x0, 0.0, z0), (0.0, height, 0.0), (0.0, 0.0, lz)),
        ((x1, 0.0, z0), (0.0, height, 0.0), (0.0, 0.0, lz)),
        ((x0, 0.0, z0), (lx, 0.0, 0.0), (0.0, height, 0.0)),
        ((x0, 0.0, z1), (lx, 0.0, 0.0), (0.0, height, 0.0)),
    ]
    for box in scene.boxes:
        (bx0, by0, bz0), (bx1, by1, bz1) = box.lower, box.upper
        dx, dy, dz = bx1 - bx0, by1 - by0, bz1 - bz0
        faces.extend(
            [
                ((bx0, by1, bz0), (dx, 0.0, 0.0), (0.0, 0.0, dz)),
                ((bx0, by0, bz0), (0.0, dy, 0.0), (0.0, 0.0, dz)),
                ((bx1, by0, bz0), (0.0, dy, 0.0), (0.0, 0.0, dz)),
                ((bx0, by0, bz0), (dx, 0.0, 0.0), (0.0, dy, 0.0)),
                ((bx0, by0, bz1), (dx, 0.0, 0.0), (0.0, dy, 0.0)),
            ]
        )
        if by0 > 0.0:
            faces.append(((bx0, by0, bz0), (dx, 0.0, 0.0), (0.0, 0.0, dz)))
    return [(np.asarray(o), np.asarray(u), np.asarray(v)) for o, u, v in faces]


def sample_surface(scene: Scene3D, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` points uniformly over the exposed surfaces of a scene.

    Faces are chosen by area and points hidden inside other solids are
    rejected, so every returned point has a signed distance of zero.
    """
    if n <= 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    faces = _surface_faces(scene)
    areas = np.array([np.linalg.norm(u) * np.linalg.norm(v) for _, u, v in faces])
    probabilities = areas / areas.sum()
    origins = np.stack([f[0] for f in faces])
    us = np.stack([f[1] for f in faces])
    vs = np.stack([f[2] for f in faces])

    accepted: list[np.ndarray] = []
    count = 0
    for _ in range(DEFAULT_MAX_RESAMPLES):
        draw = max(2 * (n - count), 64)
        which = rng.choice(len(faces), size=draw, p=probabilities)
        a = rng.random((draw, 1))
        b = rng.random((draw, 1))
        points = origins[which] + a * us[which] + b * vs[which]
        points = points[np.abs(scene_sdf(scene, points)) <= SURFACE_TOLERANCE]
        accepted.append(points[: n - count])
        count += len(accepted[-1])
        if count >= n:
            return np.concatenate(accepted)
    raise DegenerateSceneError("could not sample the scene surface")


def birdseye_occupancy(
    scene: Scene3D, resolution: int | tuple[int, int] = DEFAULT_BIRDSEYE_RESOLUTION
) -> OccupancyGrid:
    """Project the furniture footprints onto a floor grid.

    Rows follow z and columns follow x; a cell is an obstacle when its center
    lies in any footprint, seats included.
    """
    rows, cols = (resolution, resolution) if isinstance(resolution, int) else resolution
    (x0, x1), (z0, z1) = scene.x_range, scene.z_range
    xs = x0 + (np.arange(cols) + 0.5) * (x1 - x0) / cols
    zs = z0 + (np.arange(rows) + 0.5) * (z1 - z0) / rows
    grid_z, grid_x = np.meshgrid(zs, xs, indexing="ij")
    centers = np.stack([grid_x.ravel(), grid_z.ravel()], axis=1)
    obstacles = np.zeros(len(centers), dtype=bool)
    for box in scene.boxes:
        obstacles |= box.footprint_contains(centers)
    return OccupancyGrid(obstacles.reshape(rows, cols))


def generate_scene(
    seed: int,
    room_size: float = DEFAULT_ROOM_SIZE,
    furniture: int = DEFAULT_FURNITURE,
    wall_height: float = DEFAULT_WALL_HEIGHT,
    max_resamples: int = DEFAULT_MAX_RESAMPLES,
) -> Scene3D:
    """Generate a square room with non-overlapping furniture.

    Every other box is a seat. Layouts are redrawn until the free floor forms
    one connected region on the bird's-eye grid.

    Raises:
        DegenerateSceneError: If the room cannot hold furniture.
        ImpossibleConfigurationError: If no connected layout is found.
    """
    if room_size <= 2.0 * WALL_MARGIN + FURNITURE_SIZE_RANGE[1] or furniture < 0:
        raise DegenerateSceneError(f"room of size {room_size} cannot hold furniture")
    rng = np.random.default_rng(seed)
    half = room_size / 2.0
    for attempt in range(max_resamples):
        boxes: list[Box] = []
        for index in range(furniture):
            seat = index % 2 == 0
            for _ in range(100):
                sx, sz = rng.uniform(*FURNITURE_SIZE_RANGE, size=2)
                height = min(
                    SEAT_HEIGHT if seat else rng.uniform(*FURNITURE_HEIGHT_RANGE), wall_height
                )
                lx = rng.uniform(-half + WALL_MARGIN, half - WALL_MARGIN - sx)
                lz = rng.uniform(-half + WALL_MARGIN, half - WALL_MARGIN - sz)
                candidate = Box(
                    lower=(lx, 0.0, lz), upper=(lx + sx, height, lz + sz), seat=seat
                )
                if all(_footprints_apart(candidate, other) for other in boxes):
                    boxes.append(candidate)
                    break
        if len(boxes) != furniture:
            continue
        scene = Scene3D(
            x_range=(-half, half),
            z_range=(-half, half),
            wall_height=wall_height,
            boxes=tuple(boxes),
        )
        if is_connected(birdseye_occupancy(scene)):
            _LOGGER.debug("Generated scene with %d boxes after %d draws", furniture, attempt + 1)
            return scene
    raise ImpossibleConfigurationError(
        f"no connected room layout with {furniture} boxes in {max_resamples} draws"
    )


def _footprints_apart(a: Box, b: Box) -> bool:
    return (
        a.upper[0] + FURNITURE_GAP <= b.lower[0]
        or b.upper[0] + FURNITURE_GAP <= a.lower[0]
        or a.upper[2] + FURNITURE_GAP <= b.lower[2]
        or b.upper[2] + FURNITURE_GAP <= a.lower[2]
    )


class Provenance(StrEnum):
    TRAINING_DATA = "TrainingData"
    VAE_SAMPLE = "VaeSample"


@dataclass(frozen=True, kw_only=True, eq=False)
class AccessibleRegion:
    """Torso locations in scene space."""

    points: np.ndarray
    provenance: Provenance = Provenance.TRAINING_DATA

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return int(self.points.shape[0])


def birdseye_mask(scene: Scene3D, points: np.ndarray) -> np.ndarray:
    """Keep-mask of the bird's-eye filter for (N, 3) points."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    (x0, x1), (z0, z1) = scene.x_range, scene.z_range
    keep = (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 2] >= z0) & (pts[:, 2] <= z1)
    for box in scene.boxes:
        over = box.footprint_contains(pts[:, [0, 2]])
        if box.seat:
            keep &= ~over | (pts[:, 1] >= box.top)
        else:
            keep &= ~over
    return keep


def birdseye_filter(region: AccessibleRegion, scene: Scene3D) -> AccessibleRegion:
    """Drop points outside the floor or over furniture; seats keep points above their top."""
    keep = birdseye_mask(scene, region.points)
    _LOGGER.debug("Bird's-eye filter kept %d of %d points", int(keep.sum()), len(region))
    return AccessibleRegion(points=region.points[keep], provenance=region.provenance)


def synth_torso_data(scene: Scene3D, n: int, seed: int) -> AccessibleRegion:
    """Synthesize torso locations for walking and, when seats exist, sitting.

    Walking torsos float 0.9 m (+-0.05) above free floor; sitting torsos sit
    0.15 m (+-0.05) above a seat top.
    """
    rng = np.random.default_rng(seed)
    seats = scene.seats
    n_sit = int(round(n * SEAT_FRACTION)) if seats else 0
    n_walk = n - n_sit
    (x0, x1), (z0, z1) = scene.x_range, scene.z_range

    walking: list[np.ndarray] = []
    count = 0
    for _ in range(DEFAULT_MAX_RESAMPLES):
        if count >= n_walk:
            break
        draw = max(2 * (n_walk - count), 16)
        xs = rng.uniform(x0 + WALL_MARGIN, x1 - WALL_MARGIN, size=draw)
        zs = rng.uniform(z0 + WALL_MARGIN, z1 - WALL_MARGIN, size=draw)
        free = np.ones(draw, dtype=bool)
        for box in scene.boxes:
            free &= ~box.footprint_contains(np.stack([xs, zs], axis=1))
        jitter = rng.uniform(-TORSO_HEIGHT_JITTER, TORSO_HEIGHT_JITTER, size=draw)
        ys = WALKING_TORSO_HEIGHT + jitter
        batch = np.stack([xs, ys, zs], axis=1)[free][: n_walk - count]
        walking.append(batch)
        count += len(batch)
    if count < n_walk:
        raise DegenerateSceneError("no free floor to place walking torsos on")

    which = rng.integers(len(seats), size=n_sit) if n_sit else np.zeros(0, dtype=int)
    sitting = np.zeros((n_sit, 3))
    for row, index in enumerate(which):
        seat = seats[int(index)]
        margin_x = min(SEAT_MARGIN, (seat.upper[0] - seat.lower[0]) / 4.0)
        margin_z = min(SEAT_MARGIN, (seat.upper[2] - seat.lower[2]) / 4.0)
        sitting[row] = (
            rng.uniform(seat.lower[0] + margin_x, seat.upper[0] - margin_x),
            seat.top
            + SITTING_TORSO_OFFSET
            + rng.uniform(-TORSO_HEIGHT_JITTER, TORSO_HEIGHT_JITTER),
            rng.uniform(seat.lower[2] + margin_z, seat.upper[2] - margin_z),
        )

    points = np.concatenate([*walking, sitting]) if walking else sitting
    return AccessibleRegion(points=points, provenance=Provenance.TRAINING_DATA)


def voxelize_accessible(
    region: AccessibleRegion, scene: Scene3D, resolution: Sequence[int]
) -> VoxelGrid:
    """Voxelize a region over the room volume.

    A voxel is accessible when it holds a region point or touches one (26
    neighbourhood), unless its center lies inside solid geometry.

    Raises:
        PreconditionError: If any axis has fewer than 4 voxels.
        EmptyRegionError: If no region point lies inside the room.
    """
    shape = tuple(int(n) for n in resolution)
    if len(shape) != 3 or min(shape) < 4:
        raise PreconditionError(f"voxel resolution must be >= 4 per axis, got {resolution}")
    frame = VoxelGrid(accessible=np.zeros(shape, dtype=bool), lower=scene.lower, upper=scene.upper)
    if len(region) == 0:
        raise EmptyRegionError("cannot voxelize an empty region")
    idx, inside = frame.index_of(region.points)
    if not inside.any():
        raise EmptyRegionError("no region point lies inside the room")
    occupied = np.zeros(shape, dtype=bool)
    idx = idx[inside]
    occupied[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    accessible = ndimage.binary_dilation(
        occupied, structure=ndimage.generate_binary_structure(3, 3)
    )
    all_idx = np.stack(np.indices(shape), axis=-1).reshape(-1, 3)
    solid = (scene_sdf(scene, frame.centers(all_idx)) < 0.0).reshape(shape)
    accessible &= ~solid
    _LOGGER.info(
        "Voxelized %d region points into %d of %d voxels",
        len(region),
        int(accessible.sum()),
        accessible.size,
    )
    return VoxelGrid(accessible=accessible, lower=scene.lower, upper=scene.upper)


def cyclical_beta(step: int, total_steps: int, cycles: int) -> float:
    """KL weight ramping linearly from 0 to 1 within each of ``cycles`` cycles.

    Steps 0 .. ``total_steps`` - 1 are split into cycles whose lengths differ
    by at most one step; the first step of a cycle gets 0 and the last gets 1.
    Steps past the end stay on the last cycle's value of 1.
    """
    if total_steps <= 0 or cycles <= 0:
        raise PreconditionError("cyclical schedule needs positive steps and cycles")
    cycles = min(cycles, total_steps)
    step = min(max(step, 0), total_steps - 1)
    index = ((step + 1) * cycles - 1) // total_steps
    first = index * total_steps // cycles
    last = (index + 1) * total_steps // cycles - 1
    if last == first:
        return 1.0
    return (step - first) / (last - first)


@dataclass(frozen=True, kw_only=True)
class VaeConfig:
    latent_dim: int = DEFAULT_LATENT_DIM
    context_dim: int = DEFAULT_CONTEXT_DIM
    hidden: int = DEFAULT_VAE_HIDDEN
    point_depth: int = DEFAULT_POINT_ENCODER_DEPTH
    epochs: int = DEFAULT_VAE_EPOCHS
    cycles: int = DEFAULT_VAE_CYCLES
    batch_size: int = DEFAULT_VAE_BATCH_SIZE
    learning_rate: float = DEFAULT_VAE_LEARNING_RATE
    recon_weight: float = DEFAULT_VAE_RECON_WEIGHT
    cloud_size: int = DEFAULT_CLOUD_SIZE
    seed: int = DEFAULT_SEED

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], **overrides: Any) -> VaeConfig:
        keys = {
            CONF_LATENT_DIM: "latent_dim",
            CONF_CONTEXT_DIM: "context_dim",
            CONF_VAE_EPOCHS: "epochs",
            CONF_VAE_CYCLES: "cycles",
            CONF_SEED: "seed",
        }
        values = {attr: mapping[key] for key, attr in keys.items() if key in mapping}
        values.update(overrides)
        return cls(**values)


@dataclass(kw_only=True, eq=False)
class VaeModel:
    """Point-cloud conditioned VAE over torso locations.

    Coordinates are normalized to [-1, 1]^3 by the room bounds it was
    trained on.
    """

    config: VaeConfig
    point_spec: neural.NetworkSpec
    encoder_spec: neural.NetworkSpec
    decoder_spec: neural.NetworkSpec
    point_params: list[np.ndarray]
    encoder_params: list[np.ndarray]
    decoder_params: list[np.ndarray]
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]
    loss_history: list[float] = field(default_factory=list)
    kl_history: list[float] = field(default_factory=list)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def params(self) -> list[np.ndarray]:
        return [*self.point_params, *self.encoder_params, *self.decoder_params]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        a = len(self.point_params)
        b = a + len(self.encoder_params)
        self.point_params = list(params[:a])
        self.encoder_params = list(params[a:b])
        self.decoder_params = list(params[b:])

    def normalize(self, points: np.ndarray) -> np.ndarray:
        lower, upper = np.asarray(self.lower), np.asarray(self.upper)
        return 2.0 * (np.asarray(points, dtype=float) - lower) / (upper - lower) - 1.0

    def denormalize(self, points: np.ndarray) -> np.ndarray:
        lower, upper = np.asarray(self.lower), np.asarray(self.upper)
        return lower + (np.asarray(points, dtype=float) + 1.0) * (upper - lower) / 2.0


def create_vae(config: VaeConfig, scene: Scene3D) -> VaeModel:
    """Initialize an untrained VAE for scenes with the bounds of ``scene``."""
    point_layers: list[neural.Layer] = []
    features = 3
    for index in range(config.point_depth):
        last = index == config.point_depth - 1
        out = config.context_dim if last else config.hidden
        point_layers.append(
            neural.Dense(
                in_features=features,
                out_features=out,
                activation=neural.ACT_IDENTITY if last else neural.ACT_RELU,
            )
        )
        features = out
    point_spec = neural.NetworkSpec(input_shape=(3,), layers=tuple(point_layers))
    encoder_spec = neural.mlp_spec(
        config.context_dim + 3,
        2 * config.latent_dim,
        width=config.hidden,
        depth=2,
        activation=neural.ACT_RELU,
    )
    decoder_spec = neural.mlp_spec(
        config.latent_dim + config.context_dim,
        3,
        width=config.hidden,
        depth=2,
        activation=neural.ACT_RELU,
    )
    return VaeModel(
        config=config,
        point_spec=point_spec,
        encoder_spec=encoder_spec,
        decoder_spec=decoder_spec,
        point_params=neural.init_params(point_spec, config.seed),
        encoder_params=neural.init_params(encoder_spec, config.seed + 1),
        decoder_params=neural.init_params(decoder_spec, config.seed + 2),
        lower=scene.lower,
        upper=scene.upper,
    )


def point_context(model: VaeModel, cloud: np.ndarray) -> np.ndarray:
    """Max-pooled context feature of a scene point cloud (scene coordinates)."""
    features, _ = neural.forward(model.point_spec, model.point_params, model.normalize(cloud))
    return features.max(axis=0)


def vae_loss_and_grads(
    model: VaeModel,
    cloud_norm: np.ndarray,
    batch_norm: np.ndarray,
    noise: np.ndarray,
    beta: float,
) -> tuple[float, float, float, list[np.ndarray]]:
    """Loss of one batch with fixed reparameterization noise.

    Returns:
        Tuple of (loss, reconstruction term, KL term, gradients of
        ``model.params()``).
    """
    latent = model.latent_dim
    context_dim = model.config.context_dim
    point_features, point_tape = neural.forward(
        model.point_spec, model.point_params, cloud_norm, record=True
    )
    argmax = point_features.argmax(axis=0)
    context = point_features[argmax, np.arange(context_dim)]
    batch = batch_norm.shape[0]
    contexts = np.tile(context, (batch, 1))

    encoded, encoder_tape = neural.forward(
        model.encoder_spec,
        model.encoder_params,
        np.concatenate([contexts, batch_norm], axis=1),
        record=True,
    )
    mu, log_var = encoded[:, :latent], encoded[:, latent:]
    std = np.exp(0.5 * log_var)
    z = mu + std * noise
    decoded, decoder_tape = neural.forward(
        model.decoder_spec,
        model.decoder_params,
        np.concatenate([z, contexts], axis=1),
        record=True,
    )
    recon = 3.0 * neural.l2(decoded, batch_norm)
    kl = neural.kl_std_normal(mu, log_var)
    loss = model.config.recon_weight * recon + beta * kl

    assert point_tape is not None and encoder_tape is not None and decoder_tape is not None
    decoder_grads, decoder_input = neural.backward(
        decoder_tape, model.config.recon_weight * 2.0 * (decoded - batch_norm) / batch
    )
    grad_z = decoder_input[:, :latent]
    grad_context = decoder_input[:, latent:].sum(axis=0)
    kl_mu, kl_log_var = neural.kl_std_normal_grad(mu, log_var)
    grad_mu = grad_z + beta * kl_mu
    grad_log_var = grad_z * noise * 0.5 * std + beta * kl_log_var
    encoder_grads, encoder_input = neural.backward(
        encoder_tape, np.concatenate([grad_mu, grad_log_var], axis=1)
    )
    grad_context += encoder_input[:, :context_dim].sum(axis=0)
    grad_points = np.zeros_like(point_features)
    grad_points[argmax, np.arange(context_dim)] = grad_context
    point_grads, _ = neural.backward(point_tape, grad_points)
    return loss, recon, kl, [*point_grads, *encoder_grads, *decoder_grads]


def train_vae(
    scene: Scene3D,
    torso: AccessibleRegion | np.ndarray,
    config: VaeConfig | None = None,
    cloud: np.ndarray | None = None,
) -> VaeModel:
    """Fit the VAE to torso locations of one scene.

    Loss is the weighted squared reconstruction error plus a cyclically
    annealed KL term, minimized with Adam.

    Raises:
        EmptyDatasetError: If there are fewer torso points than latent dims.
        DivergenceError: If the loss becomes non-finite.
    """
    config = config or VaeConfig()
    points = torso.points if isinstance(torso, AccessibleRegion) else np.asarray(torso, dtype=float)
    if len(points) < config.latent_dim:
        raise EmptyDatasetError(
            f"need at least {config.latent_dim} torso points, got {len(points)}"
        )
    model = create_vae(config, scene)
    if cloud is None:
        cloud = sample_surface(scene, config.cloud_size, config.seed)
    cloud_norm = model.normalize(cloud)
    data = model.normalize(points)
    rng = np.random.default_rng(config.seed)
    adam = neural.AdamState.for_params(model.params(), lr=config.learning_rate)
    batches_per_epoch = math.ceil(len(data) / config.batch_size)
    total_steps = max(1, config.epochs * batches_per_epoch)

    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(data))
            epoch_loss = 0.0
            for start in range(0, len(data), config.batch_size):
                batch = data[order[start : start + config.batch_size]]
                noise = rng.standard_normal((len(batch), config.latent_dim))
                beta = cyclical_beta(step, total_steps, config.cycles)
                loss, _, kl, grads = vae_loss_and_grads(model, cloud_norm, batch, noise, beta)
                if not math.isfinite(loss):
                    raise DivergenceError(f"VAE loss became {loss} in epoch {epoch}")
                model.set_params(neural.adam_step(adam, model.params(), grads))
                model.kl_history.append(kl)
                epoch_loss += loss * len(batch)
                step += 1
            model.loss_history.append(epoch_loss / len(data))
            _LOGGER.debug("VAE epoch %d loss %.6f", epoch, model.loss_history[-1])
    except NonFiniteError as err:
        raise DivergenceError(f"VAE training diverged: {err}") from err
    _LOGGER.info("VAE trained on %d torso points for %d epochs", len(data), config.epochs)
    return model


def reconstruction_error(
    model: VaeModel, scene: Scene3D, points: np.ndarray, cloud: np.ndarray | None = None
) -> float:
    """Mean distance, in scene units, between points and their mean reconstruction."""
    if cloud is None:
        cloud = sample_surface(scene, model.config.cloud_size, model.config.seed)
    context = point_context(model, cloud)
    data = model.normalize(points)
    contexts = np.tile(context, (len(data), 1))
    encoded, _ = neural.forward(
        model.encoder_spec, model.encoder_params, np.concatenate([contexts, data], axis=1)
    )
    decoded, _ = neural.forward(
        model.decoder_spec,
        model.decoder_params,
        np.concatenate([encoded[:, : model.latent_dim], contexts], axis=1),
    )
    return float(np.mean(np.linalg.norm(model.denormalize(decoded) - points, axis=1)))


def sample_accessible(
    model: VaeModel, scene: Scene3D, n: int, seed: int, cloud: np.ndarray | None = None
) -> AccessibleRegion:
    """Decode ``n`` standard-normal latents with the scene context; not filtered."""
    if n <= 0:
        return AccessibleRegion(points=np.zeros((0, 3)), provenance=Provenance.VAE_SAMPLE)
    if cloud is None:
        cloud = sample_surface(scene, model.config.cloud_size, model.config.seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.latent_dim))
    contexts = np.tile(point_context(model, cloud), (n, 1))
    decoded, _ = neural.forward(
        model.decoder_spec, model.decoder_params, np.concatenate([z, contexts], axis=1)
    )
    return AccessibleRegion(points=model.denormalize(decoded), provenance=Provenance.VAE_SAMPLE)


def scene_to_text(scene: Scene3D) -> str:
    """Serialize a scene: extent line then one line per box with a seat flag."""
    lines = [
        f"{SCENE_MAGIC} {SCENE_VERSION}",
        "extent "
        + " ".join(
            repr(float(v))
            for v in (*scene.x_range, *scene.z_range, scene.wall_height)
        ),
    ]
    for box in scene.boxes:
        corners = " ".join(repr(v) for v in (*box.lower, *box.upper))
        lines.append(f"box {corners} {int(box.seat)}")
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> Scene3D:
    lines = [line.split() for line in text.splitlines() if line.strip()]
    try:
        if lines[0] != [SCENE_MAGIC, str(SCENE_VERSION)]:
            raise ValueError("bad scene header")
        if lines[1][0] != "extent":
            raise ValueError("missing extent line")
        x0, x1, z0, z1, height = (float(v) for v in lines[1][1:6])
        boxes = []
        for tokens in lines[2:]:
            if tokens[0] != "box" or len(tokens) != 8:
                raise ValueError(f"bad box line {' '.join(tokens)!r}")
            values = [float(v) for v in tokens[1:7]]
            lower = (values[0], values[1], values[2])
            upper = (values[3], values[4], values[5])
            boxes.append(Box(lower=lower, upper=upper, seat=tokens[7] == "1"))
    except (IndexError, ValueError) as err:
        raise CheckpointError(f"invalid scene file: {err}") from err
    return Scene3D(x_range=(x0, x1), z_range=(z0, z1), wall_height=height, boxes=tuple(boxes))


def write_scene(scene: Scene3D, path: str | Path) -> None:
    Path(path).write_text(scene_to_text(scene), encoding="utf-8")


def read_scene(path: str | Path) -> Scene3D:
    return scene_from_text(Path(path).read_text(encoding="utf-8"))


def write_region(region: AccessibleRegion, path: str | Path) -> None:
    """Write a region: header, provenance line, one "x y z" line per point."""
    lines = [f"{REGION_MAGIC} {REGION_VERSION}", f"provenance {region.provenance.value}"]
    lines.extend(" ".join(repr(float(v)) for v in point) for point in region.points)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_region(path: str | Path) -> AccessibleRegion:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        if lines[0].split() != [REGION_MAGIC, str(REGION_VERSION)]:
            raise ValueError("bad region header")
        tag, provenance = lines[1].split()
        if tag != "provenance":
            raise ValueError("missing provenance line")
        points = [[float(v) for v in line.split()] for line in lines[2:] if line.strip()]
        if any(len(p) != 3 for p in points):
            raise ValueError("region points must have 3 coordinates")
        return AccessibleRegion(
            points=np.asarray(points, dtype=float).reshape(-1, 3),
            provenance=Provenance(provenance),
        )
    except (IndexError, ValueError) as err:
        raise CheckpointError(f"invalid region file {path}: {err}") from err


_VAE_PARSERS = {"int": int, "float": float}


def save_vae(model: VaeModel, path: str | Path) -> None:
    with open(path, "wb") as handle:
        neural.write_header(handle, VAE_MAGIC, VAE_VERSION)
        for f in fields(VaeConfig):
            handle.write(f"{f.name} {getattr(model.config, f.name)!r}\n".encode("ascii"))
        bounds = " ".join(repr(float(v)) for v in (*model.lower, *model.upper))
        handle.write(f"bounds {bounds}\nend\n".encode("ascii"))
        neural.dump_arrays(handle, model.params())


def load_vae(path: str | Path) -> VaeModel:
    """Read a VAE checkpoint written by ``save_vae``."""
    with open(path, "rb") as handle:
        neural.read_header(handle, VAE_MAGIC, VAE_VERSION)
        metadata: dict[str, str] = {}
        while True:
            line = handle.readline().decode("ascii", errors="replace")
            if not line:
                raise CheckpointError("VAE metadata is truncated")
            if line.strip() == "end":
                break
            key, _, value = line.strip().partition(" ")
            metadata[key] = value
        arrays = neural.load_arrays(handle)
    try:
        config = VaeConfig(
            **{f.name: _VAE_PARSERS[str(f.type)](metadata[f.name]) for f in fields(VaeConfig)}
        )
        corners = [float(v) for v in metadata["bounds"].split()]
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"invalid VAE metadata: {err}") from err
    if len(corners) != 6:
        raise CheckpointError("VAE bounds need six values")
    scene = Scene3D(
        x_range=(corners[0], corners[3]), z_range=(corners[2], corners[5]), wall_height=corners[4]
    )
    model = create_vae(config, scene)
    if [a.shape for a in arrays] != [p.shape for p in model.params()]:
        raise CheckpointError("checkpoint arrays do not match the VAE architecture")
    model.set_params(arrays)
    return model
