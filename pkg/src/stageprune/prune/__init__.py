from .layerdrop import BLOCKS_ID, BlockRedundancy, block_cosine, layerdrop_scores, layerdrop_trajectory
from .obs import OBSPruner, obs_compensation, obs_importance, obs_prune_layer
from .stages import BACKENDS, build_stage_trajectories, default_mlp_group_size, model_structures
from .trajectory import PruneStep, PruningTrajectory, StructureSpec, removed_count
from .wanda import WandaPruner, WandaScores, apply_group_mask, wanda_prune_layer, wanda_scores

__all__ = [
    "BACKENDS",
    "BLOCKS_ID",
    "BlockRedundancy",
    "OBSPruner",
    "PruneStep",
    "PruningTrajectory",
    "StructureSpec",
    "WandaPruner",
    "WandaScores",
    "apply_group_mask",
    "block_cosine",
    "build_stage_trajectories",
    "default_mlp_group_size",
    "layerdrop_scores",
    "layerdrop_trajectory",
    "model_structures",
    "obs_compensation",
    "obs_importance",
    "obs_prune_layer",
    "removed_count",
    "wanda_prune_layer",
    "wanda_scores",
]
