"""Cone-delimited circuit perception and state estimation.

LiDAR cone detection, particle-filter landmark SLAM, Monte Carlo
localization feeding a fused vehicle-state EKF, plus a deterministic
closed-loop simulator and evaluation harness.
"""

from .core import Pose2, SeededRng, wrap_angle
from .ekf import (
    EkfParams,
    Estimator,
    HealthStatus,
    ImuInput,
    Measurement,
    SensorKind,
    VehicleState,
)
from .harness import RunLog, Scenario, ScenarioError, load_scenario, run_scenario
from .kernels import NUMBA_ENABLED, backend_name
from .lidar import ConeObservation, LidarParams, PointCloud, detect_cones
from .localize import LocalizerParams, LocalizerState, mcl_step
from .report import Metrics, emit_plots, evaluate
from .sim import Track, TrackGenerationError, WeatherProfile, generate_track
from .slam import ConeMap, ParticleSet, SlamParams, extract_map

__version__ = "0.1.0"

__all__ = [
    "ConeMap",
    "ConeObservation",
    "EkfParams",
    "Estimator",
    "HealthStatus",
    "ImuInput",
    "LidarParams",
    "LocalizerParams",
    "LocalizerState",
    "Measurement",
    "Metrics",
    "NUMBA_ENABLED",
    "ParticleSet",
    "PointCloud",
    "Pose2",
    "RunLog",
    "Scenario",
    "ScenarioError",
    "SeededRng",
    "SensorKind",
    "SlamParams",
    "Track",
    "TrackGenerationError",
    "VehicleState",
    "WeatherProfile",
    "backend_name",
    "detect_cones",
    "emit_plots",
    "evaluate",
    "extract_map",
    "generate_track",
    "load_scenario",
    "mcl_step",
    "run_scenario",
    "wrap_angle",
    "__version__",
]
