"""Tests for the evaluation harness."""

import math

import numpy as np
import pytest

from envfield.baselines import PrmConfig, RrtConfig
from envfield.bench import (
    METHOD_FIELD,
    METHOD_FIELD_AFFORDANCE,
    REPORT_FILENAME,
    TABLE_FILENAME,
    BenchReport,
    EpisodeResult,
    TimingTable,
    batched_query_timing,
    episode_pairs_3d,
    pose_validity,
    report_table,
    report_to_text,
    run_3d_suite,
    run_maze_suite,
    split_mazes,
    summarize,
    timing_report,
    write_report,
)
from envfield.const import BASELINE_PRM, BASELINE_RRT, REPORT_SCHEMA
from envfield.exceptions import BenchError, PreconditionError
from envfield.field import FieldConfig, OracleField, build_dataset, build_dataset_3d, train_field
from envfield.fmm import VoxelGrid
from envfield.grid2d import generate_maze
from envfield.planner import PlanStatus, Trajectory, walking_track
from envfield.scene3d import (
    VaeConfig,
    birdseye_filter,
    sample_accessible,
    synth_torso_data,
    train_vae,
    voxelize_accessible,
)

from .common import EuclideanField, TickClock, grid_from


def _episode(method, status=PlanStatus.REACHED_GOAL, ratio=1.0, wall_time=0.5, **extra):
    return EpisodeResult(
        environment="env",
        start=(0.0, 0.0),
        goal=(1.0, 1.0),
        method=method,
        status=status,
        steps=3,
        wall_time=wall_time,
        final_distance=0.0 if status == PlanStatus.REACHED_GOAL else 1.0,
        path_ratio=ratio if status == PlanStatus.REACHED_GOAL else math.nan,
        **extra,
    )


def _room_voxels(room):
    return VoxelGrid(accessible=np.ones((8, 5, 8), dtype=bool), lower=room.lower, upper=room.upper)


def _endpoints(report):
    return [(e.start, e.goal) for e in report.episodes]


class _ShapedField(OracleField):
    grid_shape = (8, 8)


class TestSummaries:
    """Test episode aggregation."""

    def test_summarize(self):
        """Rates count successes; ratios average successful episodes only."""
        episodes = [
            _episode("a", ratio=1.0, wall_time=0.2),
            _episode("b", ratio=1.5),
            _episode("a", ratio=1.2, wall_time=0.4),
            _episode("a", status=PlanStatus.STUCK, wall_time=0.6),
        ]
        summaries = summarize(episodes)
        assert [s.method for s in summaries] == ["a", "b"]
        a = summaries[0]
        assert a.episodes == 3
        assert a.successes == 2
        assert a.success_rate == pytest.approx(200.0 / 3.0)
        assert a.mean_ratio == pytest.approx(1.1)
        assert a.mean_time == pytest.approx(0.4)
        assert a.mean_distance == pytest.approx(1.0 / 3.0)
        assert a.valid_fraction is None

    def test_optional_fractions(self):
        """Pose fractions average over the episodes that carry them."""
        episodes = [_episode("a", valid_fraction=0.5), _episode("a", valid_fraction=1.0)]
        summary = summarize(episodes)[0]
        assert summary.valid_fraction == pytest.approx(0.75)
        assert summary.supported_fraction is None

    def test_all_failed(self):
        """A method without successes has a NaN ratio and zero rate."""
        summary = summarize([_episode("a", status=PlanStatus.FAILED)])[0]
        assert summary.success_rate == 0.0
        assert math.isnan(summary.mean_ratio)

    def test_report_lookup(self):
        """Reports look summaries up by method name."""
        report = BenchReport(suite="maze", seed=0, episodes=[_episode("a")])
        assert report.summary("a").successes == 1
        with pytest.raises(KeyError):
            report.summary("missing")


class TestSplitMazes:
    """Test the train/held-out split."""

    def test_split(self):
        """The split is sorted, disjoint and covers every seed."""
        train, held_out = split_mazes([5, 3, 1, 4], 0.75)
        assert train == [1, 3, 4]
        assert held_out == [5]

    def test_both_sides_non_empty(self):
        """Extreme fractions still leave one seed on each side."""
        assert split_mazes([2, 1], 0.1) == ([1], [2])
        assert split_mazes([2, 1, 3], 0.99) == ([1, 2], [3])

    def test_duplicates_dropped(self):
        """Repeated seeds count once."""
        train, held_out = split_mazes([1, 1, 2, 2], 0.5)
        assert train == [1]
        assert held_out == [2]

    def test_invalid_fraction(self):
        """Fractions outside (0, 1) raise."""
        with pytest.raises(PreconditionError):
            split_mazes([1, 2], 1.0)


class TestMazeSuite:
    """Test the maze benchmark."""

    def test_oracle_is_optimal(self, small_maze, random_maze):
        """The hop oracle solves every episode with ratio 1."""
        clock = TickClock(0.001)
        report = run_maze_suite(
            {"oracle": OracleField()},
            [small_maze, random_maze],
            episodes_per_maze=4,
            seed=2,
            clock=clock,
        )
        summary = report.summary("oracle")
        assert summary.episodes == 8
        assert summary.success_rate == 100.0
        assert summary.mean_ratio == pytest.approx(1.0)
        assert summary.mean_distance == pytest.approx(0.0)
        assert summary.mean_time == pytest.approx(0.001)
        assert {e.environment for e in report.episodes} == {"maze-0", "maze-1"}

    def test_deterministic_pairs(self, small_maze):
        """Methods share the same episode endpoints for a seed."""
        first = run_maze_suite({"a": OracleField()}, [small_maze], episodes_per_maze=3, seed=5)
        second = run_maze_suite({"b": OracleField()}, [small_maze], episodes_per_maze=3, seed=5)
        assert _endpoints(first) == _endpoints(second)

    def test_baselines(self, small_maze):
        """Baselines run on the same episodes and never beat the straight line."""
        report = run_maze_suite(
            {"oracle": OracleField()},
            [small_maze],
            episodes_per_maze=2,
            baselines=(BASELINE_RRT, BASELINE_PRM),
            rrt_config=RrtConfig(max_iters=300, step=0.1, seed=0),
            prm_config=PrmConfig(samples=100, seed=0),
            environment_ids=["corridor"],
        )
        assert [s.method for s in report.summaries] == ["oracle", BASELINE_RRT, BASELINE_PRM]
        assert len(report.episodes) == 6
        for episode in report.episodes:
            assert episode.environment == "corridor"
            if episode.success:
                assert episode.path_ratio >= 1.0 - 1e-9

    def test_disconnected_maze(self):
        """A pair without a path is a benchmark error."""
        with pytest.raises(BenchError):
            run_maze_suite(
                {"oracle": OracleField()}, [grid_from([".#", "#."])], episodes_per_maze=1
            )

    def test_invalid_requests(self, small_maze):
        """Empty method lists, bad ids, shape mismatches and unknown baselines raise."""
        with pytest.raises(BenchError):
            run_maze_suite({}, [small_maze])
        with pytest.raises(BenchError):
            run_maze_suite({"oracle": OracleField()}, [small_maze], environment_ids=["a", "b"])
        with pytest.raises(BenchError):
            run_maze_suite({"shaped": _ShapedField()}, [small_maze])
        with pytest.raises(BenchError):
            run_maze_suite({"oracle": OracleField()}, [small_maze], baselines=("astar",))

    @pytest.mark.slow
    def test_context_aligned_beats_hypernetwork_on_held_out_mazes(self):
        """On unseen 16x16 mazes the context-aligned field clearly beats the hypernetwork."""
        train_seeds, test_seeds = split_mazes(list(range(20)), 0.8)
        train = [generate_maze(16, 16, 0.25, seed=seed) for seed in train_seeds]
        held_out = [generate_maze(16, 16, 0.25, seed=seed) for seed in test_seeds]
        dataset = build_dataset(train, goals_per_grid=8, seed=0)
        models = {}
        for variant in ("C", "H"):
            config = FieldConfig(
                variant=variant,
                epochs=100,
                batch_size=256,
                learning_rate=3e-4,
                field_width=64,
                field_depth=3,
                seed=0,
            )
            models[variant] = train_field(dataset, config)
        report = run_maze_suite(models, held_out, episodes_per_maze=25, seed=0)
        gap = report.summary("C").success_rate - report.summary("H").success_rate
        assert gap >= 20.0


class TestRoomSuite:
    """Test the 3D benchmark."""

    def test_episode_pairs(self, room):
        """Pairs are distinct accessible voxel centers."""
        voxels = _room_voxels(room)
        pairs = episode_pairs_3d(voxels, count=5, seed=1)
        assert len(pairs) == 5
        for start, goal in pairs:
            assert not np.allclose(start, goal)
            assert voxels.index_of(np.stack([start, goal]))[1].all()

    def test_episode_pairs_need_voxels(self, room):
        """A single accessible voxel cannot make a pair."""
        accessible = np.zeros((4, 4, 4), dtype=bool)
        accessible[1, 1, 1] = True
        with pytest.raises(PreconditionError):
            episode_pairs_3d(VoxelGrid(accessible=accessible, lower=room.lower, upper=room.upper))

    def test_pose_validity(self, room):
        """Steps over the table collide; floor steps are valid."""
        floor = Trajectory(
            points=[(0.3, 0.9, 3.7), (0.5, 0.9, 3.7), (0.7, 0.9, 3.7)],
            status=PlanStatus.REACHED_GOAL,
            values=[0.0, 0.0, 0.0],
            mode="step3d",
        )
        assert pose_validity(room, floor, walking_track(0.2, 2)) == (1.0, 1.0, 1.0)
        table = Trajectory(
            points=[(0.3, 0.9, 0.3), (1.0, 0.9, 1.0)],
            status=PlanStatus.REACHED_GOAL,
            values=[0.0, 0.0],
            mode="step3d",
        )
        valid, supported, free = pose_validity(room, table, walking_track(0.2, 1))
        assert valid == 0.0
        assert supported == 1.0
        assert free == 0.0

    def test_affordance_run_keeps_poses_valid(self, room):
        """The filtered field run scores fully valid; the plain run does not."""
        episodes = [(np.array([0.3, 0.9, 0.3]), np.array([3.7, 0.9, 3.7]))]
        report = run_3d_suite(
            EuclideanField(),
            room,
            _room_voxels(room),
            episodes,
            baselines=(BASELINE_RRT,),
            pose_track=walking_track(0.25, 100),
            rrt_config=RrtConfig(max_iters=200, step=0.25, seed=0),
            clock=TickClock(),
        )
        methods = [s.method for s in report.summaries]
        assert methods == [METHOD_FIELD, METHOD_FIELD_AFFORDANCE, BASELINE_RRT]
        plain = report.summary(METHOD_FIELD)
        filtered = report.summary(METHOD_FIELD_AFFORDANCE)
        assert filtered.success_rate == 100.0
        assert filtered.valid_fraction == pytest.approx(1.0)
        assert plain.valid_fraction < filtered.valid_fraction
        for summary in report.summaries:
            assert 0.0 <= summary.valid_fraction <= 1.0

    def test_without_pose_track(self, room):
        """Without poses only the plain field run happens and no fractions are kept."""
        report = run_3d_suite(
            EuclideanField(),
            room,
            _room_voxels(room),
            [(np.array([3.7, 0.9, 0.3]), np.array([3.7, 0.9, 1.5]))],
            baselines=(),
        )
        assert [s.method for s in report.summaries] == [METHOD_FIELD]
        assert report.episodes[0].success
        assert report.episodes[0].valid_fraction is None

    def test_unknown_baseline(self, room):
        """Unknown baselines raise before anything runs."""
        with pytest.raises(BenchError):
            run_3d_suite(EuclideanField(), room, _room_voxels(room), [], baselines=("astar",))

    @pytest.mark.slow
    def test_trained_pipeline_against_baselines(self, room):
        """The trained 3D field ends as close as RRT and PRM and plans faster than PRM."""
        torso = synth_torso_data(room, 1000, seed=0)
        vae = train_vae(room, torso, VaeConfig(epochs=30, seed=0))
        region = birdseye_filter(sample_accessible(vae, room, 3000, seed=0), room)
        voxels = voxelize_accessible(region, room, (12, 6, 12))
        episodes = episode_pairs_3d(voxels, count=30, seed=0)
        indices, _ = voxels.index_of(np.stack([goal for _, goal in episodes]))
        goals = sorted({tuple(int(i) for i in index) for index in indices})
        config = FieldConfig(
            variant="B",
            spatial_dims=3,
            epochs=150,
            batch_size=512,
            learning_rate=3e-4,
            field_width=64,
            field_depth=3,
            seed=0,
        )
        model = train_field(build_dataset_3d(voxels, goals), config)
        report = run_3d_suite(
            model, room, voxels, episodes, baselines=(BASELINE_RRT, BASELINE_PRM), seed=0
        )
        field = report.summary(METHOD_FIELD)
        rrt = report.summary(BASELINE_RRT)
        prm = report.summary(BASELINE_PRM)
        assert field.episodes == 30
        assert field.mean_distance <= rrt.mean_distance
        assert field.mean_distance <= prm.mean_distance
        assert field.mean_time < prm.mean_time


class TestTiming:
    """Test batched-query timing."""

    def test_one_call_per_batch(self, empty_grid):
        """Each repeat is one batched call after a warm-up."""
        field = EuclideanField()
        table = batched_query_timing(
            field, empty_grid, (0.0, 0.0), counts=(1, 64, 256), repeats=3, clock=TickClock(0.01)
        )
        assert field.calls == 1 + 3 * 3
        assert table.counts == (1, 64, 256)
        assert table.medians == pytest.approx((0.01, 0.01, 0.01))
        table.check_sublinear()

    def test_linear_scaling_fails(self):
        """A 64-point batch at half the linear cost or more is too slow."""
        TimingTable(counts=(1, 64), samples=((1.0,), (31.0,))).check_sublinear()
        with pytest.raises(BenchError):
            TimingTable(counts=(1, 64), samples=((1.0,), (40.0,))).check_sublinear()
        with pytest.raises(BenchError):
            TimingTable(counts=(4, 64), samples=((1.0,), (1.0,))).check_sublinear()

    def test_medians(self):
        """Medians ignore outliers."""
        table = TimingTable(counts=(1,), samples=((1.0, 9.0, 2.0),))
        assert table.median(1) == 2.0

    def test_invalid_requests(self, empty_grid):
        """Zero repeats or counts raise."""
        with pytest.raises(PreconditionError):
            batched_query_timing(EuclideanField(), empty_grid, (0.0, 0.0), repeats=0)
        with pytest.raises(PreconditionError):
            batched_query_timing(EuclideanField(), empty_grid, (0.0, 0.0), counts=(0,))


class TestReports:
    """Test report serialization."""

    def test_report_text(self):
        """Reports list schema, summaries and episodes as key-value lines."""
        report = BenchReport(suite="maze", seed=3, config={"mazes": 1}, episodes=[_episode("a")])
        lines = report_to_text(report).splitlines()
        assert lines[:4] == [f"schema {REPORT_SCHEMA}", "suite maze", "seed 3", "config.mazes 1"]
        assert "method.a.success_rate 100.000000" in lines
        assert "method.a.valid_fraction none" in lines
        assert lines[-1].startswith("episode.0 env=env method=a status=ReachedGoal steps=3")

    def test_timing_text(self):
        """Timing reports carry medians and raw samples."""
        table = TimingTable(counts=(1, 4), samples=((0.5, 0.25, 1.0), (2.0,)))
        text = report_to_text(timing_report(table, seed=1))
        assert "timing.1.median 0.500000" in text
        assert "timing.1.samples 0.500000 0.250000 1.000000" in text
        rows = report_table(timing_report(table)).splitlines()
        assert rows[2].split() == ["4", "2.000000", "4.00"]

    def test_table(self):
        """The summary table has one row per method."""
        report = BenchReport(suite="maze", seed=0, episodes=[_episode("a"), _episode("b")])
        rows = report_table(report).splitlines()
        assert rows[0].split()[:3] == ["method", "episodes", "success_%"]
        assert [row.split()[0] for row in rows[1:]] == ["a", "b"]

    def test_write_report(self, tmp_path):
        """Both files land in the output directory, which is created."""
        report = BenchReport(suite="maze", seed=0, episodes=[_episode("a")])
        report_path, table_path = write_report(report, tmp_path / "out")
        assert report_path == tmp_path / "out" / REPORT_FILENAME
        assert table_path.name == TABLE_FILENAME
        assert report_path.read_text(encoding="utf-8") == report_to_text(report)
        assert table_path.read_text(encoding="utf-8") == report_table(report)
