"""Cooperative percolation on one-dimensional Poisson proximity graphs."""
from .core import (
    LN3,
    ClusterLaw,
    LWRParams,
    ThresholdContext,
    critical_disruption_fraction,
    critical_penetration,
    expected_cluster_size,
    lwr_critical_density_ratio,
    lwr_speed,
    solve_fixed_point,
)
from .fdfit import FDObservations, LWRPowerLawRegressor, compare_models, fit_theta, sensitivity_table
from .ingest import read_fd_csv, read_traj_csv
from .percolation import ProximityClusterer, SimConfig, decompose, simulate, sweep
from .trajectory import (
    FDAggregator,
    PhantomJamDetector,
    TrajectorySet,
    detect_jams,
    gap_cv_snapshot,
    trajectories_to_fd,
    variance_by_density,
)

__version__ = "0.1.0"

__all__ = [
    "LN3",
    "ClusterLaw",
    "FDAggregator",
    "FDObservations",
    "LWRParams",
    "LWRPowerLawRegressor",
    "PhantomJamDetector",
    "ProximityClusterer",
    "SimConfig",
    "ThresholdContext",
    "TrajectorySet",
    "__version__",
    "compare_models",
    "critical_disruption_fraction",
    "critical_penetration",
    "decompose",
    "detect_jams",
    "expected_cluster_size",
    "fit_theta",
    "gap_cv_snapshot",
    "lwr_critical_density_ratio",
    "lwr_speed",
    "read_fd_csv",
    "read_traj_csv",
    "sensitivity_table",
    "simulate",
    "solve_fixed_point",
    "sweep",
    "trajectories_to_fd",
    "variance_by_density",
]
