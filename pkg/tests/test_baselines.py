"""Tests for the RRT and PRM comparison planners."""

import numpy as np
import pytest

from envfield.baselines import (
    CollisionSpace,
    PrmConfig,
    RoadmapGraph,
    RrtConfig,
    build_roadmap,
    grid_collision_oracle,
    grow_rrt,
    prm_plan,
    rrt_plan,
    voxel_collision_oracle,
)
from envfield.exceptions import PreconditionError
from envfield.fmm import VoxelGrid
from envfield.grid2d import OccupancyGrid, to_norm
from envfield.planner import PlanStatus

from .common import grid_from


def _open_space():
    return CollisionSpace(
        lower=(-1.0, -1.0),
        upper=(1.0, 1.0),
        is_free=lambda p: np.ones(len(p), dtype=bool),
        resolution=0.05,
    )


def _assert_collision_free(space, trajectory):
    points = trajectory.as_array()
    assert space.is_free(points).all()
    for a, b in zip(points, points[1:]):
        assert space.segment_free(a, b)


class TestCollisionSpace:
    """Test collision oracles."""

    def test_invalid_spaces(self):
        """Degenerate bounds and resolutions raise."""
        with pytest.raises(PreconditionError):
            CollisionSpace(lower=(0.0, 0.0), upper=(1.0, 0.0), is_free=lambda p: p, resolution=0.1)
        with pytest.raises(PreconditionError):
            CollisionSpace(lower=(0.0,), upper=(1.0,), is_free=lambda p: p, resolution=0.0)

    def test_grid_oracle(self, small_maze):
        """Obstacle cells and points outside the square collide."""
        space = grid_collision_oracle(small_maze)
        assert space.dims == 2
        assert space.point_free(np.array(to_norm(small_maze, (0, 0))))
        assert not space.point_free(np.array(to_norm(small_maze, (1, 1))))
        assert not space.point_free(np.array([1.2, 0.0]))

    def test_segment_through_wall(self):
        """A segment crossing an obstacle row collides; one beside it does not."""
        grid = grid_from(["...", "###", "..."])
        space = grid_collision_oracle(grid)
        top = np.array(to_norm(grid, (0, 1)))
        bottom = np.array(to_norm(grid, (2, 1)))
        assert not space.segment_free(top, bottom)
        assert space.segment_free(np.array(to_norm(grid, (0, 0))), np.array(to_norm(grid, (0, 2))))

    def test_voxel_oracle(self):
        """Voxel spaces live in scene coordinates."""
        accessible = np.ones((4, 4, 4), dtype=bool)
        accessible[2] = False
        space = voxel_collision_oracle(
            VoxelGrid(accessible=accessible, lower=(0.0, 0.0, 0.0), upper=(4.0, 4.0, 4.0))
        )
        assert space.dims == 3
        assert space.point_free(np.array([0.5, 0.5, 0.5]))
        assert not space.point_free(np.array([2.5, 0.5, 0.5]))
        assert not space.segment_free(np.array([0.5, 0.5, 0.5]), np.array([3.5, 0.5, 0.5]))


class TestRrt:
    """Test rapidly-exploring random trees."""

    def test_open_space(self):
        """RRT reaches the goal with steps no longer than the step size."""
        space = _open_space()
        config = RrtConfig(max_iters=2000, step=0.1, seed=3)
        trajectory = rrt_plan(space, np.array([-0.8, -0.8]), np.array([0.8, 0.8]), config)
        assert trajectory.status == PlanStatus.REACHED_GOAL
        assert trajectory.points[0] == (-0.8, -0.8)
        assert trajectory.points[-1] == (0.8, 0.8)
        lengths = np.linalg.norm(np.diff(trajectory.as_array(), axis=0), axis=1)
        assert np.all(lengths <= 0.1 + 1e-12)

    def test_maze(self, small_maze):
        """RRT threads the maze without touching obstacles."""
        space = grid_collision_oracle(small_maze)
        start = np.array(to_norm(small_maze, (0, 0)))
        goal = np.array(to_norm(small_maze, (5, 5)))
        trajectory = rrt_plan(space, start, goal, RrtConfig(max_iters=5000, step=0.1, seed=1))
        assert trajectory.status == PlanStatus.REACHED_GOAL
        _assert_collision_free(space, trajectory)

    def test_tree_size_bounded(self, small_maze):
        """The tree never exceeds max_iters + 1 nodes."""
        space = grid_collision_oracle(small_maze)
        tree, index = grow_rrt(
            space,
            np.array(to_norm(small_maze, (0, 0))),
            np.array(to_norm(small_maze, (5, 5))),
            RrtConfig(max_iters=20, step=0.05),
        )
        assert index is None
        assert 1 <= len(tree) <= 21
        assert tree.parents[0] == -1

    def test_failure_ends_at_closest_node(self):
        """Without iterations the plan is the start alone and Failed."""
        start, goal = np.array([-0.5, 0.0]), np.array([0.5, 0.0])
        trajectory = rrt_plan(_open_space(), start, goal, RrtConfig(max_iters=0))
        assert trajectory.status == PlanStatus.FAILED
        assert trajectory.points == [(-0.5, 0.0)]

    def test_goal_within_one_step(self):
        """A visible goal within one step connects immediately."""
        start, goal = np.array([0.0, 0.0]), np.array([0.03, 0.0])
        trajectory = rrt_plan(_open_space(), start, goal, RrtConfig(max_iters=0))
        assert trajectory.reached
        assert trajectory.steps == 1

    def test_deterministic(self):
        """Same seed, same plan."""
        config = RrtConfig(max_iters=500, step=0.1, seed=8)
        first = rrt_plan(_open_space(), np.array([-0.5, -0.5]), np.array([0.5, 0.5]), config)
        second = rrt_plan(_open_space(), np.array([-0.5, -0.5]), np.array([0.5, 0.5]), config)
        assert first.points == second.points

    def test_endpoints_in_collision(self, small_maze):
        """Blocked endpoints raise."""
        space = grid_collision_oracle(small_maze)
        with pytest.raises(PreconditionError):
            rrt_plan(
                space,
                np.array(to_norm(small_maze, (1, 1))),
                np.array(to_norm(small_maze, (0, 0))),
            )

    def test_invalid_config(self):
        """Non-positive steps and out-of-range bias raise."""
        with pytest.raises(PreconditionError):
            RrtConfig(step=0.0)
        with pytest.raises(PreconditionError):
            RrtConfig(goal_bias=1.5)
        assert RrtConfig.from_mapping({"rrt_step": 0.2, "seed": 4}).step == 0.2


class TestPrm:
    """Test probabilistic roadmaps."""

    def test_roadmap_edges_are_free(self, small_maze):
        """Every edge is a collision-free segment weighted by its length."""
        space = grid_collision_oracle(small_maze)
        roadmap = build_roadmap(
            space,
            np.array(to_norm(small_maze, (0, 0))),
            np.array(to_norm(small_maze, (5, 5))),
            PrmConfig(samples=80, neighbors=5, seed=2),
        )
        assert len(roadmap.nodes) == 82
        assert space.is_free(roadmap.nodes).all()
        for i, j, weight in roadmap.edges:
            assert i != j
            assert space.segment_free(roadmap.nodes[i], roadmap.nodes[j])
            assert weight == pytest.approx(np.linalg.norm(roadmap.nodes[i] - roadmap.nodes[j]))

    def test_open_space(self):
        """PRM connects start and goal through the roadmap."""
        trajectory = prm_plan(
            _open_space(),
            np.array([-0.8, -0.8]),
            np.array([0.8, 0.8]),
            PrmConfig(samples=100, neighbors=10, seed=1),
        )
        assert trajectory.reached
        assert trajectory.points[0] == (-0.8, -0.8)
        assert trajectory.points[-1] == (0.8, 0.8)

    def test_disconnected_space_fails(self):
        """Across a full wall the plan ends on the start side."""
        grid = grid_from(["....", "####", "...."])
        space = grid_collision_oracle(grid)
        trajectory = prm_plan(
            space,
            np.array(to_norm(grid, (0, 0))),
            np.array(to_norm(grid, (2, 3))),
            PrmConfig(samples=60, seed=0),
        )
        assert trajectory.status == PlanStatus.FAILED
        assert trajectory.as_array()[:, 1].max() < -1.0 / 3.0
        _assert_collision_free(space, trajectory)

    def test_start_and_goal_first(self):
        """The roadmap keeps start and goal at fixed indices."""
        start, goal = np.array([0.1, 0.2]), np.array([0.3, 0.4])
        roadmap = build_roadmap(_open_space(), start, goal, PrmConfig(samples=5))
        assert roadmap.nodes[RoadmapGraph.START].tolist() == [0.1, 0.2]
        assert roadmap.nodes[RoadmapGraph.GOAL].tolist() == [0.3, 0.4]

    def test_invalid_config(self):
        """Neighbour counts must be positive."""
        with pytest.raises(PreconditionError):
            PrmConfig(neighbors=0)

    def test_full_grid_sampling(self):
        """Free samples are found on an obstacle-free grid."""
        space = grid_collision_oracle(OccupancyGrid.empty(4, 4))
        start, goal = np.array([-0.5, -0.5]), np.array([0.5, 0.5])
        roadmap = build_roadmap(space, start, goal, PrmConfig(samples=10))
        assert len(roadmap.nodes) == 12
