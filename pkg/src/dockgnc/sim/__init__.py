"""Scenario configuration, synthetic sensing and the closed-loop runner."""

from .config import ConfigError, ScenarioConfig, config_from_dict, default_config, load_config
from .loop import RunMetrics, run_closed_loop
from .sensors import PoseSensorModel, mock_pose_sensor, pose_error_metrics

__all__ = ["ConfigError", "PoseSensorModel", "RunMetrics", "ScenarioConfig", "config_from_dict",
           "default_config", "load_config", "mock_pose_sensor", "pose_error_metrics",
           "run_closed_loop"]
