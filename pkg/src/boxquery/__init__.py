"""Region-based active learning for semantic segmentation with priority maps."""

from boxquery.acquisition import STRATEGIES, CandidateBox, build_priorities, joint_priority, select_query
from boxquery.adapters import FileAdapter, NoisyOracle, PixelClassifier, builtin_adapter
from boxquery.alloop import ALState, Experiment, ExperimentConfig, init_experiment, run_experiment, run_iteration
from boxquery.clickcost import ClickCounts, CostLedger, Polygon, click_priority, compute_costs, count_true_clicks, rdp
from boxquery.gridmaps import aggregate_boxes, box_sum, build_sat, entropy_map, mask_labeled
from boxquery.metaseg import GradientBoostedTrees, MetaSegRegressor
from boxquery.segmentation import argmax_mask, connected_components, mean_iou, segment_iou, trace_contours
from boxquery.synth import SceneSpec, generate_dataset, generate_scene

__version__ = "0.1.0"

__all__ = [
    "STRATEGIES",
    "ALState",
    "CandidateBox",
    "ClickCounts",
    "CostLedger",
    "Experiment",
    "ExperimentConfig",
    "FileAdapter",
    "GradientBoostedTrees",
    "MetaSegRegressor",
    "NoisyOracle",
    "PixelClassifier",
    "Polygon",
    "SceneSpec",
    "aggregate_boxes",
    "argmax_mask",
    "box_sum",
    "build_priorities",
    "build_sat",
    "builtin_adapter",
    "click_priority",
    "compute_costs",
    "connected_components",
    "count_true_clicks",
    "entropy_map",
    "generate_dataset",
    "generate_scene",
    "init_experiment",
    "joint_priority",
    "mask_labeled",
    "mean_iou",
    "rdp",
    "run_experiment",
    "run_iteration",
    "segment_iou",
    "select_query",
    "trace_contours",
]
