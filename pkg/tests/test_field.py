"""Tests for field datasets, variants and training."""

import logging

import numpy as np
import pytest

from envfield import field, neural
from envfield.exceptions import (
    ArityMismatchError,
    CheckpointError,
    EmptyDatasetError,
    GoalOnObstacleError,
    PreconditionError,
)
from envfield.field import (
    FieldConfig,
    Oracle3DField,
    OracleField,
    build_dataset,
    build_dataset_3d,
    align_feature,
    create_model,
    encode_context,
    hypernet_forward,
    load_model,
    save_model,
    train_field,
    transformed_prediction_map,
    untransform,
)
from envfield.fmm import VoxelGrid, bfs_hops, dijkstra_solve, target_transform
from envfield.grid2d import (
    GridPos,
    OccupancyGrid,
    accessible_cells,
    generate_maze,
    mark_obstacles,
    to_norm,
)
from envfield.planner import greedy_search

from .common import central_difference, relative_error

TINY = {"field_width": 8, "field_depth": 1, "encoder_depth": 1, "encoder_channels": 2}


def _tiny_config(variant, **overrides):
    return FieldConfig(variant=variant, **{**TINY, "epochs": 0, **overrides})


def _trained(variant, grid, goals, **overrides):
    dataset = build_dataset([grid], goals=[goals])
    return train_field(dataset, _tiny_config(variant, **overrides))


def _open_voxels(shape, upper):
    return VoxelGrid(accessible=np.ones(shape, dtype=bool), lower=(0.0, 0.0, 0.0), upper=upper)


class TestFieldConfig:
    """Test config validation."""

    def test_unknown_variant(self):
        """Only A, B, C and H exist."""
        with pytest.raises(PreconditionError):
            FieldConfig(variant="Z")

    def test_grid_variants_are_2d(self):
        """C and H need a grid, which 3D scenes do not have."""
        with pytest.raises(ArityMismatchError):
            FieldConfig(variant="C", spatial_dims=3)

    def test_from_mapping(self):
        """Config keys map onto fields and overrides win."""
        config = FieldConfig.from_mapping({"variant": "B", "epochs": 3, "seed": 9}, seed=4)
        assert config.variant == "B"
        assert config.epochs == 3
        assert config.seed == 4

    def test_untransform_inverts_target(self):
        """Distances come back from transformed values; zero maps to inf."""
        distances = np.array([0.0, 1.0, 7.5])
        np.testing.assert_allclose(untransform(target_transform(distances)), distances)
        assert np.isinf(untransform(0.0))
        assert np.isinf(untransform(-1.0))


class TestBuildDataset:
    """Test 2D dataset construction."""

    def test_one_sample_per_cell(self, small_maze):
        """Obstacles are included with the obstacle value by default."""
        dataset = build_dataset([small_maze], goals=[[(5, 5)]])
        assert len(dataset) == 36
        assert dataset.queries.shape == (36, 2)
        assert dataset.goals.shape == (36, 2)
        assert dataset.targets.max() == 1.0
        assert np.sum(dataset.targets == -1.0) == small_maze.obstacles.sum()
        assert dataset.distinct_goals == 1

    def test_accessible_only(self, small_maze):
        """Dropping obstacles keeps the accessible cells."""
        dataset = build_dataset([small_maze], goals=[[(5, 5)]], include_obstacles=False)
        assert len(dataset) == small_maze.accessible_count
        assert dataset.targets.min() > 0.0

    def test_targets_follow_oracle(self, small_maze):
        """Targets are the transformed oracle distances at cell centers."""
        dataset = build_dataset([small_maze], "hops", goals=[[(0, 0)]], include_obstacles=False)
        expected = bfs_hops(small_maze, (0, 0)).transformed()[small_maze.accessible]
        np.testing.assert_allclose(dataset.targets, expected)

    def test_sampled_goals_are_distinct(self, random_maze):
        """goals_per_grid draws different accessible goals."""
        dataset = build_dataset([random_maze], goals_per_grid=5, seed=2)
        assert dataset.distinct_goals == 5
        assert len(dataset) == 5 * random_maze.height * random_maze.width

    def test_augmentation_adds_perturbed_grids(self, empty_grid):
        """Each (grid, goal) pair is repeated on a grid with extra obstacles."""
        dataset = build_dataset([empty_grid], goals=[[(0, 0)]], augment_obstacle_prob=0.3, seed=1)
        assert len(dataset.grids) == 2
        perturbed = dataset.grids[1]
        assert perturbed.obstacles.sum() > 0
        assert perturbed.is_accessible((0, 0))
        assert set(dataset.grid_index.tolist()) == {0, 1}

    def test_errors(self, small_maze):
        """Empty inputs, bad goals and bad options raise."""
        with pytest.raises(EmptyDatasetError):
            build_dataset([])
        with pytest.raises(GoalOnObstacleError):
            build_dataset([small_maze], goals=[[(1, 1)]])
        with pytest.raises(PreconditionError):
            build_dataset([small_maze], "astar")
        with pytest.raises(PreconditionError):
            build_dataset([small_maze], augment_obstacle_prob=1.0)

    def test_take_reorders(self, small_maze):
        """take selects samples in the given order."""
        dataset = build_dataset([small_maze], goals=[[(5, 5)]])
        picked = dataset.take(np.array([3, 0]))
        assert len(picked) == 2
        np.testing.assert_array_equal(picked.queries[1], dataset.queries[0])
        assert picked.sample(0).grid == small_maze


class TestBuildDataset3D:
    """Test voxel dataset construction."""

    def test_shapes_and_bounds(self):
        """Only accessible voxels unless obstacles are requested."""
        accessible = np.ones((4, 2, 4), dtype=bool)
        accessible[2, :, 2] = False
        voxels = VoxelGrid(accessible=accessible, lower=(0.0, 0.0, 0.0), upper=(4.0, 2.0, 4.0))
        dataset = build_dataset_3d(voxels, [(0, 0, 0)], include_obstacles=False)
        assert len(dataset) == 30
        assert dataset.spatial_dims == 3
        assert dataset.bounds == ((0.0, 0.0, 0.0), (4.0, 2.0, 4.0))
        assert np.abs(dataset.queries).max() < 1.0
        full = build_dataset_3d(voxels, [(0, 0, 0), (3, 1, 3)])
        assert len(full) == 64
        assert full.distinct_goals == 2

    def test_needs_goals(self):
        """An empty goal list raises."""
        voxels = _open_voxels((2, 2, 2), (2.0, 2.0, 2.0))
        with pytest.raises(EmptyDatasetError):
            build_dataset_3d(voxels, [])


class TestVariants:
    """Test the four network variants."""

    @pytest.mark.parametrize("variant", ["A", "B", "C", "H"])
    def test_query_shapes(self, variant, small_maze):
        """Every variant answers a batch with one value per point."""
        model = create_model(_tiny_config(variant), small_maze.shape)
        points = np.array([[0.0, 0.0], [0.5, -0.5], [-0.9, 0.9]])
        out = model.point_values(small_maze, (0.1, 0.2), points)
        assert out.shape == (3,)
        grads = model.point_gradients(small_maze, (0.1, 0.2), points)
        assert grads.shape == (3, 2)

    def test_variant_a_ignores_goal(self):
        """A learns one fixed goal."""
        model = create_model(_tiny_config("A"))
        points = np.array([[0.2, 0.3]])
        np.testing.assert_array_equal(
            model.point_values(None, (0.0, 0.0), points),
            model.point_values(None, (0.5, 0.5), points),
        )

    def test_grid_variants_need_grid(self, small_maze):
        """C and H raise without a grid."""
        for variant in ("C", "H"):
            model = create_model(_tiny_config(variant), small_maze.shape)
            with pytest.raises(ArityMismatchError):
                model.point_values(None, (0.0, 0.0), np.zeros((1, 2)))

    def test_query_arity(self):
        """Points and goals must have the model's dimensionality."""
        model = create_model(_tiny_config("B"))
        with pytest.raises(ArityMismatchError):
            model.point_values(None, (0.0, 0.0), np.zeros((2, 3)))
        with pytest.raises(ArityMismatchError):
            model.point_values(None, (0.0, 0.0, 0.0), np.zeros((2, 2)))

    def test_hyper_needs_training_shape(self, small_maze, empty_grid):
        """The hypernetwork is tied to its grid size."""
        model = create_model(_tiny_config("H"), small_maze.shape)
        with pytest.raises(ArityMismatchError):
            model.point_values(empty_grid, (0.0, 0.0), np.zeros((1, 2)))

    def test_context_encoder_follows_grid(self, small_maze):
        """Different obstacle layouts change variant C predictions."""
        model = create_model(_tiny_config("C", seed=3, encoder_channels=4), small_maze.shape)
        grid = OccupancyGrid.empty(6, 6)
        points = np.array([[0.1, 0.1]])
        assert not np.allclose(
            model.point_values(small_maze, (0.0, 0.0), points),
            model.point_values(grid, (0.0, 0.0), points),
        )

    @pytest.mark.parametrize("variant", ["A", "B", "C", "H"])
    def test_gradients_match_finite_differences(self, variant, small_maze):
        """Query gradients equal central differences of the predictions."""
        model = create_model(_tiny_config(variant, omega_0=3.0, seed=5), small_maze.shape)
        rng = np.random.default_rng(5)
        points = rng.uniform(-0.7, 0.7, (4, 2))
        goal = np.array([0.3, -0.2])
        grads = model.point_gradients(small_maze, goal, points)
        for point, grad in zip(points, grads):
            numeric = central_difference(
                lambda p: float(model.point_values(small_maze, goal, p[None, :])[0]), point.copy()
            )
            assert relative_error(grad, numeric) < 1e-4

    def test_cell_values_match_point_values(self, small_maze):
        """Cell queries are point queries at cell centers."""
        model = create_model(_tiny_config("B"))
        cells = accessible_cells(small_maze)[:5]
        points = np.array([tuple(to_norm(small_maze, c)) for c in cells])
        np.testing.assert_allclose(
            model.cell_values(small_maze, GridPos(5, 5), cells),
            model.point_values(small_maze, to_norm(small_maze, (5, 5)), points),
        )
        assert model.cell_values(small_maze, GridPos(5, 5), []).shape == (0,)


class TestContextFeatures:
    """Test the grid encoders of variants C and H."""

    def test_feature_map_keeps_grid_size(self, small_maze):
        """Same padding preserves the spatial dimensions."""
        model = create_model(_tiny_config("C"), small_maze.shape)
        features = encode_context(model, small_maze)
        assert features.shape == (6, 6, TINY["encoder_channels"])
        assert encode_context(model, small_maze) is features

    def test_one_cell_changes_features(self, small_maze):
        """Blocking a single cell changes the feature map."""
        model = create_model(_tiny_config("C", seed=2), small_maze.shape)
        blocked = mark_obstacles(small_maze, [accessible_cells(small_maze)[0]])
        assert not np.allclose(encode_context(model, small_maze), encode_context(model, blocked))

    def test_cached_features_match_fresh(self, small_maze):
        """Queries give the same values before and after the cache is dropped."""
        model = create_model(_tiny_config("C", seed=4), small_maze.shape)
        points = np.random.default_rng(4).uniform(-1.0, 1.0, (6, 2))
        cached = model.point_values(small_maze, (0.2, 0.2), points)
        model.clear_cache()
        np.testing.assert_array_equal(model.point_values(small_maze, (0.2, 0.2), points), cached)

    def test_size_mismatch_warns(self, small_maze, empty_grid, caplog):
        """The encoder runs on other grid sizes with a warning."""
        model = create_model(_tiny_config("C"), small_maze.shape)
        with caplog.at_level(logging.WARNING, logger="envfield.field"):
            features = encode_context(model, empty_grid)
        assert features.shape[:2] == (8, 8)
        assert "applied to a (8, 8) grid" in caplog.text

    def test_wrong_variant(self, small_maze):
        """Only C has a context encoder and only H a hypernetwork."""
        with pytest.raises(ArityMismatchError):
            encode_context(create_model(_tiny_config("B")), small_maze)
        with pytest.raises(ArityMismatchError):
            hypernet_forward(create_model(_tiny_config("C"), small_maze.shape), small_maze)

    def test_align_at_cell_centers(self):
        """Cell centers read back their own feature vectors."""
        feature_map = np.random.default_rng(1).normal(size=(3, 4, 2))
        grid = OccupancyGrid.empty(3, 4)
        cells = [GridPos(0, 0), GridPos(1, 2), GridPos(2, 3)]
        points = np.array([tuple(to_norm(grid, c)) for c in cells])
        np.testing.assert_allclose(
            align_feature(feature_map, points), [feature_map[c.row, c.col] for c in cells]
        )

    def test_align_interpolates(self):
        """Halfway between two centers gives their mean; borders clamp."""
        feature_map = np.random.default_rng(2).normal(size=(3, 4, 2))
        mid, corner = align_feature(feature_map, np.array([[0.0, 0.0], [-1.0, -1.0]]))
        np.testing.assert_allclose(mid, (feature_map[1, 1] + feature_map[1, 2]) / 2)
        np.testing.assert_allclose(corner, feature_map[0, 0])

    def test_align_constant_map(self):
        """A constant map is constant everywhere."""
        points = np.random.default_rng(3).uniform(-1.0, 1.0, (10, 2))
        np.testing.assert_allclose(align_feature(np.full((5, 5, 3), 0.25), points), 0.25)

    def test_hypernet_emits_hyponet_parameters(self, small_maze):
        """The emitted arrays fill the hyponetwork exactly and depend on the grid."""
        model = create_model(_tiny_config("H"), small_maze.shape)
        params = hypernet_forward(model, small_maze)
        assert sum(p.size for p in params) == neural.param_count(model.network)
        assert hypernet_forward(model, small_maze) is params
        blocked = mark_obstacles(small_maze, [accessible_cells(small_maze)[0]])
        other = hypernet_forward(model, blocked)
        assert not all(np.array_equal(a, b) for a, b in zip(params, other))


class TestTraining:
    """Test the training loop."""

    def test_loss_decreases(self, small_maze):
        """A short run lowers the L1 loss."""
        model = _trained(
            "A",
            small_maze,
            [(5, 5)],
            epochs=60,
            batch_size=12,
            learning_rate=1e-3,
            omega_0=10.0,
            field_width=16,
        )
        assert len(model.loss_history) == 60
        assert model.loss_history[-1] < model.loss_history[0]
        assert np.isfinite(model.final_loss)

    def test_training_is_deterministic(self, small_maze):
        """Same data and seed give the same parameters."""
        first = _trained("B", small_maze, [(5, 5), (0, 0)], epochs=3, learning_rate=1e-3)
        second = _trained("B", small_maze, [(5, 5), (0, 0)], epochs=3, learning_rate=1e-3)
        for a, b in zip(first.trainable(), second.trainable()):
            np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("variant", ["C", "H"])
    def test_grid_variants_train(self, variant, small_maze):
        """Batches never mix grids and the loss stays finite."""
        dataset = build_dataset([small_maze, OccupancyGrid.empty(6, 6)], goals_per_grid=2, seed=1)
        config = _tiny_config(variant, epochs=2, batch_size=16, learning_rate=1e-3)
        model = train_field(dataset, config)
        assert len(model.loss_history) == 2
        assert np.isfinite(model.final_loss)

    def test_variant_a_rejects_many_goals(self, small_maze):
        """A single network without goal input cannot learn two goals."""
        dataset = build_dataset([small_maze], goals=[[(5, 5), (0, 0)]])
        with pytest.raises(ArityMismatchError):
            train_field(dataset, _tiny_config("A"))

    def test_dimension_mismatch(self, small_maze):
        """A 2D dataset cannot train a 3D model."""
        dataset = build_dataset([small_maze], goals=[[(5, 5)]])
        with pytest.raises(ArityMismatchError):
            train_field(dataset, _tiny_config("B", spatial_dims=3))

    def test_empty_dataset(self, small_maze):
        """No samples, no training."""
        dataset = build_dataset([small_maze], goals=[[(5, 5)]]).take(np.array([], dtype=int))
        with pytest.raises(EmptyDatasetError):
            train_field(dataset, _tiny_config("A"))

    def test_3d_model(self):
        """A 3D variant A model answers scene-space queries."""
        voxels = _open_voxels((3, 2, 3), (3.0, 2.0, 3.0))
        model = train_field(
            build_dataset_3d(voxels, [(0, 0, 0)]), _tiny_config("A", spatial_dims=3, epochs=2)
        )
        points = np.array([[1.0, 1.0, 1.0], [2.5, 0.5, 2.5]])
        out = model.scene_values(np.array([0.5, 0.5, 0.5]), points)
        assert out.shape == (2,)

    def test_prediction_map_shape(self, small_maze):
        """One prediction per cell."""
        model = create_model(_tiny_config("B"))
        assert transformed_prediction_map(model, small_maze, GridPos(5, 5)).shape == (6, 6)

    @pytest.mark.slow
    def test_fixed_goal_greedy_success(self):
        """A trained variant A field guides greedy search to the goal from nearly every start."""
        grid = generate_maze(8, 8, 0.25, seed=3)
        goal = accessible_cells(grid)[-1]
        config = FieldConfig(
            variant="A",
            epochs=1500,
            batch_size=16,
            learning_rate=3e-4,
            field_width=64,
            field_depth=3,
            seed=0,
        )
        model = train_field(build_dataset([grid], goals=[[goal]]), config)
        starts = [cell for cell in accessible_cells(grid) if cell != goal]
        reached = sum(greedy_search(model, grid, start, goal).reached for start in starts)
        assert reached / len(starts) >= 0.95

    @pytest.mark.slow
    def test_goal_conditioned_generalizes_to_new_goals(self):
        """Variant B trained on 32 goals guides greedy search to goals it never saw."""
        grid = generate_maze(11, 11, 0.25, seed=11)
        cells = accessible_cells(grid)
        rng = np.random.default_rng(0)
        picks = rng.choice(len(cells), size=32, replace=False)
        trained_goals = [cells[i] for i in sorted(picks)]
        held_out = [cell for cell in cells if cell not in trained_goals]
        config = FieldConfig(
            variant="B",
            epochs=300,
            batch_size=64,
            learning_rate=3e-4,
            field_width=64,
            field_depth=3,
            seed=0,
        )
        model = train_field(build_dataset([grid], goals=[trained_goals]), config)
        reached = 0
        for _ in range(100):
            goal = held_out[rng.integers(len(held_out))]
            start = goal
            while start == goal:
                start = cells[rng.integers(len(cells))]
            reached += greedy_search(model, grid, start, goal).reached
        assert reached >= 85


class TestOracleFields:
    """Test the exact-oracle adapters."""

    def test_oracle_field_values(self, small_maze):
        """Transformed hop counts by default, negated distances on request."""
        cells = accessible_cells(small_maze)
        hops = bfs_hops(small_maze, (5, 5))
        values = OracleField().cell_values(small_maze, GridPos(5, 5), cells)
        np.testing.assert_allclose(values, [hops.transformed()[c] for c in cells])
        negative_oracle = OracleField("dijkstra", negative=True)
        negative = negative_oracle.cell_values(small_maze, GridPos(5, 5), cells)
        dij = dijkstra_solve(small_maze, (5, 5))
        np.testing.assert_allclose(negative, [-dij.values[c] for c in cells])

    def test_oracle_field_unknown(self):
        """Unknown oracles raise at construction."""
        with pytest.raises(PreconditionError):
            OracleField("astar")

    def test_oracle_3d_field(self):
        """The goal voxel center scores 1 and values fall off with distance."""
        voxels = _open_voxels((5, 2, 5), (5.0, 2.0, 5.0))
        oracle = Oracle3DField(voxels)
        goal = np.array([0.5, 0.5, 0.5])
        points = np.array([[0.5, 0.5, 0.5], [2.5, 0.5, 0.5], [4.5, 0.5, 0.5]])
        values = oracle.scene_values(goal, points)
        assert values[0] == pytest.approx(1.0)
        assert values[0] > values[1] > values[2]
        with pytest.raises(GoalOnObstacleError):
            oracle.scene_values(np.array([9.0, 0.0, 0.0]), np.zeros((1, 3)))


class TestModelCheckpoint:
    """Test model files."""

    @pytest.mark.parametrize("variant", ["A", "B", "C", "H"])
    def test_save_and_load(self, variant, small_maze, tmp_path):
        """Loaded models predict exactly what the saved ones did."""
        goals = [(5, 5)] if variant == "A" else [(5, 5), (0, 0)]
        model = _trained(variant, small_maze, goals, epochs=1)
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        restored = load_model(path)
        assert restored.config == model.config
        assert restored.grid_shape == model.grid_shape
        assert restored.final_loss == model.final_loss
        points = np.array([[0.1, -0.3], [0.6, 0.6]])
        np.testing.assert_array_equal(
            restored.point_values(small_maze, (0.2, 0.2), points),
            model.point_values(small_maze, (0.2, 0.2), points),
        )

    def test_3d_bounds_survive(self, tmp_path):
        """Scene bounds are part of the checkpoint."""
        voxels = _open_voxels((2, 2, 2), (2.0, 1.0, 2.0))
        dataset = build_dataset_3d(voxels, [(0, 0, 0)])
        model = train_field(dataset, _tiny_config("A", spatial_dims=3))
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        assert load_model(path).bounds == ((0.0, 0.0, 0.0), (2.0, 1.0, 2.0))

    def test_foreign_file(self, tmp_path):
        """Files without the model header raise."""
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"not a model\n")
        with pytest.raises(CheckpointError):
            load_model(path)

    def test_architecture_mismatch(self, small_maze, tmp_path):
        """Arrays that do not fit the recorded config raise."""
        model = _trained("B", small_maze, [(5, 5)])
        model.params = model.params[:-1]
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        with pytest.raises(CheckpointError):
            load_model(path)


def test_module_exports_query():
    """The query helpers are importable from the module."""
    assert callable(field.query)
    assert callable(field.query_gradient)
