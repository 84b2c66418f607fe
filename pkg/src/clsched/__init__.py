"""Loosely-coupled cooperative localization with learned measurement scheduling."""

from clsched.errors import (
    ConfigError,
    DataError,
    NumericalError,
    SchemaError,
    SingularGeometryError,
)
from clsched.motion import (
    AgentState,
    Belief,
    OdometryInput,
    OdometryNoiseModel,
    motion_jacobians,
    propagate_belief,
    wrap_angle,
)
from clsched.fusion import (
    MeasurementJacobians,
    RelativeMeasurement,
    dmv_gain,
    dmv_update,
    dmv_updated_cov,
    measurement_jacobians,
    optimize_omega,
    pose_fix_update,
    predict_measurement,
    sequential_update,
)

__version__ = "0.1.0"
