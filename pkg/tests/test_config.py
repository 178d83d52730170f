"""Tests for run configuration."""

from pathlib import Path

import pytest
import voluptuous as vol

from envfield.config import (
    COMMAND_BENCH,
    COMMAND_MAZE_GEN,
    COMMAND_PLAN,
    COMMAND_SOLVE,
    COMMAND_TRAIN,
    COMMANDS,
    RunConfig,
    agent_list,
    cell,
    format_value,
    one_of_each,
    output_dir,
    parse_config_text,
    parse_flags,
    point3,
    positive_ints,
    read_config_file,
    validate,
    write_config_echo,
)
from envfield.const import (
    CONFIG_FILENAME,
    DEFAULT_LOG_LEVEL,
    DEFAULT_MAZE_WIDTH,
    DEFAULT_SEED,
    DEFAULT_TIMING_COUNTS,
    DEFAULT_VOXEL_RESOLUTION,
)
from envfield.exceptions import ConfigError
from envfield.grid2d import GridPos


class TestValidators:
    """Test the value validators."""

    def test_cell(self):
        """Cells come from "row,col" text or pairs."""
        assert cell("3, 4") == GridPos(3, 4)
        assert cell((1, 2)) == GridPos(1, 2)
        with pytest.raises(vol.Invalid):
            cell("a,b")
        with pytest.raises(vol.Invalid):
            cell("1,2,3")

    def test_point3(self):
        """Points need exactly three numbers."""
        assert point3("1,0.5,-2") == (1.0, 0.5, -2.0)
        with pytest.raises(vol.Invalid):
            point3("1,2")

    def test_positive_ints(self):
        """Integer lists must be non-empty and positive."""
        assert positive_ints("1,4,16") == (1, 4, 16)
        assert positive_ints((2, 3)) == (2, 3)
        with pytest.raises(vol.Invalid):
            positive_ints("0,4")
        with pytest.raises(vol.Invalid):
            positive_ints("")

    def test_agent_list(self):
        """Agents are "start>goal" pairs separated by semicolons."""
        assert agent_list("0,0>2,2; 2,0>0,2") == (
            (GridPos(0, 0), GridPos(2, 2)),
            (GridPos(2, 0), GridPos(0, 2)),
        )
        with pytest.raises(vol.Invalid):
            agent_list("0,0")
        with pytest.raises(vol.Invalid):
            agent_list("")

    def test_one_of_each(self):
        """Choice lists reject unknown names."""
        validator = one_of_each(("rrt", "prm"))
        assert validator("prm,rrt") == ("prm", "rrt")
        assert validator("") == ()
        with pytest.raises(vol.Invalid):
            validator("rrt,astar")


class TestValidate:
    """Test command validation."""

    def test_defaults(self):
        """Missing keys take the command defaults."""
        config = validate(COMMAND_MAZE_GEN)
        assert config["width"] == DEFAULT_MAZE_WIDTH
        assert config["seed"] == DEFAULT_SEED
        assert config["log_level"] == DEFAULT_LOG_LEVEL
        assert "out" not in config

    def test_coercion(self):
        """Text values are coerced and normalized."""
        values = {"variant": "h", "epochs": "3", "include_obstacles": "false"}
        config = validate(COMMAND_TRAIN, values)
        assert config["variant"] == "H"
        assert config["epochs"] == 3
        assert config["include_obstacles"] is False
        assert config["voxel_resolution"] == DEFAULT_VOXEL_RESOLUTION

    def test_later_sources_win(self):
        """Flags override the config file."""
        config = validate(COMMAND_MAZE_GEN, {"width": "5", "height": "7"}, {"width": "6"})
        assert config["width"] == 6
        assert config["height"] == 7

    def test_invalid_values(self):
        """Out-of-range values name the offending key."""
        with pytest.raises(ConfigError, match="density"):
            validate(COMMAND_MAZE_GEN, {"density": "1.5"})
        with pytest.raises(ConfigError):
            validate(COMMAND_MAZE_GEN, {"log_level": "verbose"})

    def test_unknown_key(self):
        """Keys the command does not take are rejected."""
        with pytest.raises(ConfigError, match="bogus"):
            validate(COMMAND_MAZE_GEN, {"bogus": "1"})

    def test_required_keys(self):
        """Solve needs a maze and a goal."""
        with pytest.raises(ConfigError):
            validate(COMMAND_SOLVE, {"maze": "maze.txt"})

    def test_unknown_command(self):
        """Only known commands validate."""
        with pytest.raises(ConfigError):
            validate("fly")

    def test_require(self):
        """Optional keys that a mode needs raise with the flag name."""
        config = validate(COMMAND_PLAN)
        with pytest.raises(ConfigError, match="--max-steps"):
            config.require("max_steps")

    def test_every_command_has_defaults(self):
        """Commands without required keys validate from nothing."""
        for command in COMMANDS:
            if command != COMMAND_SOLVE:
                assert validate(command).command == command


class TestConfigText:
    """Test config files and the config echo."""

    def test_parse(self):
        """Comments and blank lines are skipped; dashes become underscores."""
        text = "# header\n\nlog-level = debug  # trailing\nwidth=12\n"
        assert parse_config_text(text) == {"log_level": "debug", "width": "12"}

    def test_parse_error(self):
        """Lines without "=" raise with their location."""
        with pytest.raises(ConfigError, match="cfg:2"):
            parse_config_text("width = 3\nheight\n", "cfg")

    def test_missing_file(self, tmp_path):
        """Unreadable files raise ConfigError."""
        with pytest.raises(ConfigError):
            read_config_file(tmp_path / "missing.txt")

    @pytest.mark.parametrize(
        "command,values",
        [
            (COMMAND_MAZE_GEN, {"width": "9", "density": "0.3"}),
            (COMMAND_PLAN, {"agents": "0,0>2,2;2,0>0,2", "affordance": "true"}),
            (COMMAND_BENCH, {"baselines": "rrt,prm", "models": "a.ckpt,b.ckpt"}),
            (COMMAND_TRAIN, {"mazes": "m.txt", "goal": "1,2", "learning_rate": "0.0005"}),
        ],
    )
    def test_echo_validates_back(self, command, values):
        """The echoed text validates to the same values."""
        config = validate(command, values)
        again = validate(command, parse_config_text(config.to_text()))
        assert dict(again.values) == dict(config.values)

    def test_echo_file(self, tmp_path):
        """The echo starts with the command and lists keys in order."""
        path = write_config_echo(validate(COMMAND_BENCH), tmp_path)
        assert path == tmp_path / CONFIG_FILENAME
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "# command: bench"
        keys = [line.split(" = ")[0] for line in lines[1:]]
        assert keys == sorted(keys)
        assert f"timing_counts = {format_value(DEFAULT_TIMING_COUNTS)}" in lines

    def test_format_value(self):
        """Booleans, lists and agent pairs have text forms."""
        assert format_value(True) == "true"
        assert format_value((1, 2)) == "1,2"
        assert format_value(((GridPos(0, 1), GridPos(2, 3)),)) == "0,1>2,3"
        assert format_value(()) == ""


class TestFlags:
    """Test free-form flag parsing."""

    def test_forms(self):
        """Both "--key value" and "--key=value" work."""
        flags = parse_flags(["--width", "8", "--log-level=debug"])
        assert flags == {"width": "8", "log_level": "debug"}

    def test_errors(self):
        """Stray words and dangling flags raise."""
        with pytest.raises(ConfigError):
            parse_flags(["width"])
        with pytest.raises(ConfigError):
            parse_flags(["--width"])


class TestOutputDir:
    """Test output directory resolution."""

    def test_explicit(self, tmp_path):
        """--out wins."""
        config = validate(COMMAND_MAZE_GEN, {"out": str(tmp_path / "x")})
        assert output_dir(config) == tmp_path / "x"

    def test_environment_root(self, out_root):
        """Without --out the command name goes under the output root."""
        assert output_dir(validate(COMMAND_MAZE_GEN)) == out_root / "maze-gen"

    def test_default_root(self, monkeypatch):
        """Without either, runs/<command> is used."""
        monkeypatch.delenv("ENVFIELD_OUTPUT_ROOT", raising=False)
        assert output_dir(RunConfig(command="solve", values={})) == Path("runs") / "solve"
