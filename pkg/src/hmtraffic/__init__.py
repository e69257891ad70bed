"""History-masked imitation learning for microscopic urban traffic simulation."""

__version__ = "0.1.0"

from .road_geom import Road, RoadNetwork, load_network, save_network
from .ingest import SignalSchedule, TrajectoryDataset, build_dataset, estimate_traffic_lights
from .graph import GraphConfig, GraphSnapshot, World, build_snapshot
from .egat import GaussianPrediction, ModelConfig, ModelParams, backward, forward, init_params
from .train import SnapshotSource, TrainConfig, evaluate_nll, train
from .sim import ConstantVelocityPolicy, EgatPolicy, SimConfig, initial_state, lqr_solve, run_policy
from .rulebase import IdmParams, MobilParams, calibrate_idm, idm_acceleration, rule_step
from .metrics import TrajectoryLog, evaluate_logs, off_road_rate, rmse
from .estimators import HMMILPolicy, IDMCalibrator

__all__ = [
    "Road", "RoadNetwork", "load_network", "save_network",
    "SignalSchedule", "TrajectoryDataset", "build_dataset", "estimate_traffic_lights",
    "GraphConfig", "GraphSnapshot", "World", "build_snapshot",
    "GaussianPrediction", "ModelConfig", "ModelParams", "backward", "forward", "init_params",
    "SnapshotSource", "TrainConfig", "evaluate_nll", "train",
    "ConstantVelocityPolicy", "EgatPolicy", "SimConfig", "initial_state", "lqr_solve", "run_policy",
    "IdmParams", "MobilParams", "calibrate_idm", "idm_acceleration", "rule_step",
    "TrajectoryLog", "evaluate_logs", "off_road_rate", "rmse",
    "HMMILPolicy", "IDMCalibrator",
]
