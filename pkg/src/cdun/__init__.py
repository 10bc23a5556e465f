"""Cross-consistent deep unfolding for all-in-one video restoration."""
from .degrade import TAU_MIN, DegradationField, FlowField, MotionSpec, VideoClip, apply_degradation, invert_degradation
from .errors import CdunError, ConfigError, ContractError, IngestError, NumericalGuardError
from .sade import SADE, SadeConfig
from .solver import CDUN, SolverConfig, restore, window_indices, z_update

__version__ = "0.1.0"
