"""Multivariate hybrid spatial network analysis.

Radius-constrained betweenness flows on pedestrian networks under a
randomized hybrid angular/Euclidean metric, calibrated against pedestrian
counts with weighted, cross-validated ridge regression.
"""

__version__ = "0.1.0"

from .betweenness import (AnalysisSpec, FlowField, elastic_betweenness, run_battery,
                          single_origin_betweenness, table1_battery, two_phase_betweenness)
from .calibrate import (CalibratedModel, assemble_design, cv_select_penalty, evaluate, geh,
                        observation_weights, predict_direct, predict_incremental, predict_null, ridge_fit,
                        sweep_sigma)
from .config import ProjectConfig, load_config
from .errors import (CalibrationError, ConfigError, MhspnaError, NetworkError, SingularSystemError,
                     SnapError)
from .estimators import FlowBattery, FlowRegressor
from .metric import MetricParams, RandStream, sample_rand
from .network import (CountPoint, Link, SpatialNetwork, load_network, prepare_network, save_network,
                      snap_count_points)
from .routing import PathTree, fraction_within_radius, radius_set, shortest_path_tree
from .synth import grid_network

__all__ = [
    "AnalysisSpec", "FlowField", "elastic_betweenness", "two_phase_betweenness", "single_origin_betweenness",
    "run_battery", "table1_battery",
    "CalibratedModel", "assemble_design", "cv_select_penalty", "evaluate", "geh", "observation_weights",
    "predict_direct", "predict_incremental", "predict_null", "ridge_fit", "sweep_sigma",
    "ProjectConfig", "load_config",
    "MhspnaError", "NetworkError", "SnapError", "ConfigError", "CalibrationError", "SingularSystemError",
    "FlowBattery", "FlowRegressor",
    "MetricParams", "RandStream", "sample_rand",
    "CountPoint", "Link", "SpatialNetwork", "load_network", "prepare_network", "save_network",
    "snap_count_points",
    "PathTree", "fraction_within_radius", "radius_set", "shortest_path_tree",
    "grid_network",
]
