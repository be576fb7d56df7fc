"""Stage-wise structural pruning for a toy diffusion transformer."""

from .calib import StagePartition, build_all_stage_calibrations, build_stage_calibration, capture_activations
from .config import ExperimentConfig, load_config
from .evo import (
    GreedyScheduleSearch,
    Individual,
    LevelSwitchSearch,
    SearchConfig,
    global_sparsity,
    greedy_search,
    init_population,
    mutate,
    search,
    step_generation,
    uniform_schedule,
)
from .exceptions import (
    DegenerateActivations,
    IncompleteTrajectory,
    InvalidConfig,
    InvalidInput,
    InvalidSchedule,
    InvalidShape,
    InvalidTimestep,
    MissingReference,
    SingularHessian,
    StagePruneError,
    TrainingDiverged,
)
from .fitness import FitnessEvaluator, FitnessSeeds, energy_distance, ssim
from .prune import OBSPruner, WandaPruner, build_stage_trajectories
from .routedb import RouteDatabase, build_db, materialize, memory_report, route, stitch

__version__ = "0.1.0"
