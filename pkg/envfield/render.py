"""Raster heatmaps and vector contour plots of 2D fields and trajectories."""

from __future__ import annotations

from collections.abc import Sequence
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .const import DEFAULT_CONTOUR_LEVELS, DEFAULT_RENDER_SCALE, SVG_HASH_SALT  # noqa: E402
from .exceptions import CheckpointError, PreconditionError  # noqa: E402
from .grid2d import GridPos  # noqa: E402
from .planner import KIND_CELL, Trajectory  # noqa: E402

_LOGGER = logging.getLogger(__name__)

OBSTACLE_RGB = (128, 0, 0)
PATH_RGB = (0, 0, 255)
START_RGB = (0, 200, 0)
GOAL_RGB = (255, 0, 0)


def heatmap(
    values: np.ndarray, obstacles: np.ndarray, scale: int = DEFAULT_RENDER_SCALE
) -> np.ndarray:
    """Render transformed values as an (H*scale, W*scale, 3) uint8 image.

    Brightness grows with the value (1 is white); obstacles are dark red.
    """
    if scale < 1:
        raise PreconditionError(f"scale must be >= 1, got {scale}")
    vals = np.asarray(values, dtype=float)
    mask = np.asarray(obstacles, dtype=bool)
    if vals.shape != mask.shape or vals.ndim != 2:
        raise PreconditionError(f"values {vals.shape} and obstacles {mask.shape} must match")
    level = np.rint(255.0 * np.clip(np.nan_to_num(vals, nan=0.0), 0.0, 1.0)).astype(np.uint8)
    image = np.repeat(level[:, :, None], 3, axis=2)
    image[mask] = OBSTACLE_RGB
    return np.kron(image, np.ones((scale, scale, 1), dtype=np.uint8))


def _pixel_path(trajectory: Trajectory, shape: tuple[int, int], scale: int) -> np.ndarray:
    """Trajectory points as (N, 2) pixel (row, col) coordinates."""
    points = trajectory.as_array()
    if trajectory.kind == KIND_CELL:
        return (points + 0.5) * scale
    height, width = shape
    rows = (points[:, 1] + 1.0) * height * scale / 2.0
    cols = (points[:, 0] + 1.0) * width * scale / 2.0
    return np.stack([rows, cols], axis=1)


def _paint(image: np.ndarray, center: np.ndarray, radius: int, rgb: tuple[int, int, int]) -> None:
    row, col = (int(np.floor(c)) for c in center)
    top, left = max(row - radius, 0), max(col - radius, 0)
    image[top : row + radius + 1, left : col + radius + 1] = rgb


def overlay_trajectory(
    image: np.ndarray,
    trajectory: Trajectory,
    shape: tuple[int, int],
    scale: int = DEFAULT_RENDER_SCALE,
    goal: GridPos | Sequence[float] | None = None,
) -> np.ndarray:
    """Draw a trajectory onto a heatmap copy: path blue, start green, goal red."""
    out = np.array(image, copy=True)
    if not trajectory.points:
        return out
    pixels = _pixel_path(trajectory, shape, scale)
    for a, b in zip(pixels[:-1], pixels[1:]):
        count = max(2, int(np.ceil(np.abs(b - a).max())) + 1)
        for point in np.linspace(a, b, count):
            _paint(out, np.clip(point, 0, np.array(out.shape[:2]) - 1), 0, PATH_RGB)
    radius = max(scale // 4, 1)
    limit = np.array(out.shape[:2]) - 1
    _paint(out, np.clip(pixels[0], 0, limit), radius, START_RGB)
    if goal is not None:
        goal_traj = Trajectory(points=[goal], status=trajectory.status)
        goal_pixel = _pixel_path(goal_traj, shape, scale)[0]
    else:
        goal_pixel = pixels[-1]
    _paint(out, np.clip(goal_pixel, 0, limit), radius, GOAL_RGB)
    return out


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write an RGB uint8 image as binary PPM (P6)."""
    pixels = np.ascontiguousarray(image, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise PreconditionError(f"expected an (H, W, 3) image, got {pixels.shape}")
    height, width = pixels.shape[:2]
    with open(path, "wb") as handle:
        handle.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        handle.write(pixels.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise CheckpointError(f"{path} is not a binary PPM written by envfield")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    if pixels.size != width * height * 3:
        raise CheckpointError(f"{path} pixel data is truncated")
    return pixels.reshape(height, width, 3)


def write_contours_svg(
    values: np.ndarray,
    obstacles: np.ndarray,
    path: str | Path,
    levels: int = DEFAULT_CONTOUR_LEVELS,
    trajectory: Trajectory | None = None,
    goal: GridPos | Sequence[float] | None = None,
) -> None:
    """Plot level sets of a field, obstacles filled, optionally with a trajectory.

    Output is reproducible: the SVG id salt is fixed and no date is stored.
    """
    vals = np.ma.masked_array(np.asarray(values, dtype=float), mask=np.asarray(obstacles))
    height, width = vals.shape
    with plt.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        fig, ax = plt.subplots(figsize=(width / 4 + 1, height / 4 + 1))
        ax.imshow(
            np.asarray(obstacles, dtype=float),
            cmap="Reds",
            vmin=0.0,
            vmax=2.0,
            extent=(0, width, height, 0),
            interpolation="nearest",
        )
        rows, cols = np.mgrid[0:height, 0:width] + 0.5
        finite = vals.compressed()
        if finite.size and np.ptp(finite) > 0:
            ax.contour(cols, rows, vals, levels=levels, cmap="viridis", linewidths=0.8)
        if trajectory is not None and trajectory.points:
            pixels = _pixel_path(trajectory, (height, width), 1)
            ax.plot(pixels[:, 1], pixels[:, 0], color="blue", linewidth=1.2)
            ax.plot(pixels[0, 1], pixels[0, 0], marker="o", color="green")
            end = pixels[-1]
            if goal is not None:
                marker = Trajectory(points=[goal], status=trajectory.status)
                end = _pixel_path(marker, (height, width), 1)[0]
            ax.plot(end[1], end[0], marker="*", color="red")
        ax.set_xlim(0, width)
        ax.set_ylim(height, 0)
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    _LOGGER.debug("Wrote contour plot %s", path)
