"""Constants for the envfield path-planning toolkit."""

DOMAIN = "envfield"

# Environment variables
ENV_OUTPUT_ROOT = "ENVFIELD_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# File formats
CONFIG_FILENAME = "config.txt"
CELL_ACCESSIBLE = "."
CELL_OBSTACLE = "#"
UNREACHABLE_TOKEN = "inf"
PARAMS_MAGIC = "ENVFIELD-PARAMS"
PARAMS_VERSION = 1
MODEL_MAGIC = "ENVFIELD-MODEL"
MODEL_VERSION = 1
VAE_MAGIC = "ENVFIELD-VAE"
VAE_VERSION = 1
TRAJECTORY_MAGIC = "ENVFIELD-TRAJECTORY"
TRAJECTORY_VERSION = 1
SCENE_MAGIC = "ENVFIELD-SCENE"
REGION_MAGIC = "ENVFIELD-REGION"
REPORT_SCHEMA = "envfield-report/1"

# Configuration keys shared by every command
CONF_LOG_LEVEL = "log_level"
CONF_SEED = "seed"
CONF_OUT = "out"

# Environment generation
CONF_WIDTH = "width"
CONF_HEIGHT = "height"
CONF_DENSITY = "density"
CONF_COUNT = "count"
CONF_MAX_RESAMPLES = "max_resamples"
CONF_ROOM_SIZE = "room_size"
CONF_FURNITURE = "furniture"
CONF_WALL_HEIGHT = "wall_height"

LOG_LEVELS = ("debug", "info", "warning", "error")
DEFAULT_LOG_LEVEL = "warning"
DEFAULT_SEED = 0
DEFAULT_MAZE_WIDTH = 16
DEFAULT_MAZE_HEIGHT = 16
DEFAULT_OBSTACLE_DENSITY = 0.3
DEFAULT_MAZE_COUNT = 1
DEFAULT_MAX_RESAMPLES = 1000
DEFAULT_ROOM_SIZE = 6.0
DEFAULT_FURNITURE = 4

# Oracles
ORACLE_FMM = "fmm"
ORACLE_DIJKSTRA = "dijkstra"
ORACLE_HOPS = "hops"
ORACLES = (ORACLE_FMM, ORACLE_DIJKSTRA, ORACLE_HOPS)
TRAINING_ORACLES = (ORACLE_FMM, ORACLE_DIJKSTRA)

CONF_MAZE = "maze"
CONF_MAZES = "mazes"
CONF_GOAL = "goal"
CONF_START = "start"
CONF_ORACLE = "oracle"

DEFAULT_ORACLE = ORACLE_DIJKSTRA

# Neural engine
DEFAULT_LEARNING_RATE = 5e-5
DEFAULT_ADAM_BETA1 = 0.9
DEFAULT_ADAM_BETA2 = 0.999
DEFAULT_ADAM_EPSILON = 1e-8
DEFAULT_OMEGA_0 = 30.0

# Field variants
VARIANT_FIXED = "A"
VARIANT_GOAL = "B"
VARIANT_CONTEXT = "C"
VARIANT_HYPER = "H"
VARIANTS = (VARIANT_FIXED, VARIANT_GOAL, VARIANT_CONTEXT, VARIANT_HYPER)
GRID_VARIANTS = (VARIANT_CONTEXT, VARIANT_HYPER)

HYPER_PRESET_DESK = "desk"
HYPER_PRESET_FULL = "full"
HYPER_PRESETS = (HYPER_PRESET_DESK, HYPER_PRESET_FULL)

CONF_KIND = "kind"
CONF_VARIANT = "variant"
CONF_GOALS_PER_GRID = "goals_per_grid"
CONF_INCLUDE_OBSTACLES = "include_obstacles"
CONF_AUGMENT_OBSTACLE_PROB = "augment_obstacle_prob"
CONF_EPOCHS = "epochs"
CONF_BATCH_SIZE = "batch_size"
CONF_LEARNING_RATE = "learning_rate"
CONF_OMEGA_0 = "omega_0"
CONF_FIELD_DEPTH = "field_depth"
CONF_FIELD_WIDTH = "field_width"
CONF_ENCODER_DEPTH = "encoder_depth"
CONF_ENCODER_CHANNELS = "encoder_channels"
CONF_HYPER_PRESET = "hyper_preset"

KIND_FIELD = "field"
KIND_FIELD3D = "field3d"
KIND_VAE = "vae"
TRAIN_KINDS = (KIND_FIELD, KIND_FIELD3D, KIND_VAE)

DEFAULT_VARIANT = VARIANT_FIXED
DEFAULT_GOALS_PER_GRID = 8
DEFAULT_INCLUDE_OBSTACLES = True
DEFAULT_AUGMENT_OBSTACLE_PROB = 0.0
DEFAULT_EPOCHS = 200
DEFAULT_BATCH_SIZE = 256
DEFAULT_FIELD_DEPTH = 5
DEFAULT_FIELD_WIDTH = 128
DEFAULT_ENCODER_DEPTH = 6
DEFAULT_ENCODER_CHANNELS = 32
DEFAULT_ENCODER_KERNEL = 3
DEFAULT_HYPER_PRESET = HYPER_PRESET_DESK
DEFAULT_OBSTACLE_VALUE = -1.0

# (conv layers, conv channels, dense layers, dense width, hypo layers, hypo width)
HYPER_ARCHITECTURES = {
    HYPER_PRESET_DESK: (4, 8, 3, 64, 3, 64),
    HYPER_PRESET_FULL: (11, 8, 7, 64, 7, 64),
}
HYPER_HEAD_SCALE = 1e-3

# Planning
MODE_GREEDY = "greedy"
MODE_GRADIENT = "gradient"
MODE_MULTI = "multi"
MODE_STEP3D = "step3d"
PLAN_MODES = (MODE_GREEDY, MODE_GRADIENT, MODE_MULTI, MODE_STEP3D)

CONF_MODE = "mode"
CONF_MODEL = "model"
CONF_MAX_STEPS = "max_steps"
CONF_STEP_SIZE = "step_size"
CONF_GOAL_RADIUS = "goal_radius"
CONF_MAX_ITERS = "max_iters"
CONF_AGENTS = "agents"
CONF_AFFORDANCE = "affordance"
CONF_POSE = "pose"
CONF_STEP_LENGTH = "step_length"
CONF_SCENE = "scene"
CONF_REGION = "region"
CONF_CONTACT_TOLERANCE = "contact_tolerance"

DEFAULT_STEP_SIZE = 0.05
DEFAULT_GOAL_RADIUS = 0.1
DEFAULT_GRADIENT_MAX_ITERS = 400
DEFAULT_STEP_LENGTH = 0.25
DEFAULT_STEP3D_MAX_STEPS = 200
DEFAULT_CONTACT_TOLERANCE = 0.0
POSE_STANDING = "standing"
POSE_SITTING = "sitting"
POSES = (POSE_STANDING, POSE_SITTING)

# Baselines
CONF_BASELINES = "baselines"
BASELINE_RRT = "rrt"
BASELINE_PRM = "prm"
BASELINES = (BASELINE_RRT, BASELINE_PRM)

CONF_RRT_MAX_ITERS = "rrt_max_iters"
CONF_RRT_STEP = "rrt_step"
CONF_RRT_GOAL_BIAS = "rrt_goal_bias"
CONF_PRM_SAMPLES = "prm_samples"
CONF_PRM_NEIGHBORS = "prm_neighbors"

DEFAULT_RRT_MAX_ITERS = 500
DEFAULT_RRT_STEP = 0.05
DEFAULT_RRT_GOAL_BIAS = 0.1
DEFAULT_PRM_SAMPLES = 500
DEFAULT_PRM_NEIGHBORS = 5
SEGMENT_CHECK_FRACTION = 0.25

# Synthetic scenes
DEFAULT_WALL_HEIGHT = 2.5
SEAT_HEIGHT = 0.45
WALKING_TORSO_HEIGHT = 0.9
SITTING_TORSO_OFFSET = 0.15
TORSO_HEIGHT_JITTER = 0.05
SEAT_FRACTION = 0.25
WALL_MARGIN = 0.2
FURNITURE_SIZE_RANGE = (0.5, 1.5)
FURNITURE_HEIGHT_RANGE = (0.7, 1.8)
FURNITURE_GAP = 0.4
SEAT_MARGIN = 0.1
DEFAULT_BIRDSEYE_RESOLUTION = 24

CONF_VAE = "vae"
CONF_TORSO_SAMPLES = "torso_samples"
CONF_LATENT_DIM = "latent_dim"
CONF_CONTEXT_DIM = "context_dim"
CONF_VAE_EPOCHS = "vae_epochs"
CONF_VAE_CYCLES = "vae_cycles"
CONF_REGION_SAMPLES = "region_samples"
CONF_VOXEL_RESOLUTION = "voxel_resolution"
CONF_GOALS3D = "goals3d"

DEFAULT_TORSO_SAMPLES = 2000
DEFAULT_LATENT_DIM = 8
DEFAULT_CONTEXT_DIM = 64
DEFAULT_POINT_ENCODER_DEPTH = 3
DEFAULT_VAE_HIDDEN = 128
DEFAULT_VAE_EPOCHS = 60
DEFAULT_VAE_CYCLES = 4
DEFAULT_VAE_BATCH_SIZE = 128
DEFAULT_VAE_LEARNING_RATE = 1e-3
DEFAULT_VAE_RECON_WEIGHT = 200.0
DEFAULT_CLOUD_SIZE = 512
DEFAULT_REGION_SAMPLES = 4000
DEFAULT_VOXEL_RESOLUTION = (24, 10, 24)
DEFAULT_GOALS3D = 16

# Benchmarks
SUITE_MAZE = "maze"
SUITE_3D = "3d"
SUITE_TIMING = "timing"
SUITES = (SUITE_MAZE, SUITE_3D, SUITE_TIMING)

CONF_SUITE = "suite"
CONF_MODELS = "models"
CONF_EPISODES = "episodes"
CONF_EPISODES_PER_MAZE = "episodes_per_maze"
CONF_INCLUDE_ORACLE = "include_oracle"
CONF_TIMING_COUNTS = "timing_counts"
CONF_TIMING_REPEATS = "timing_repeats"

DEFAULT_EPISODES_PER_MAZE = 10
DEFAULT_EPISODES_3D = 30
DEFAULT_TIMING_COUNTS = (1, 4, 16, 64, 256)
DEFAULT_TIMING_REPEATS = 5
DEFAULT_TRAIN_FRACTION = 0.8
RATIO_EPSILON = 1e-6

# Rendering
CONF_FIELD = "field"
CONF_TRAJECTORY = "trajectory"
CONF_SCALE = "scale"
CONF_CONTOUR_LEVELS = "contour_levels"

DEFAULT_RENDER_SCALE = 16
DEFAULT_CONTOUR_LEVELS = 10
SVG_HASH_SALT = DOMAIN
