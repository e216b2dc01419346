"""Stabilizing controller synthesis by guiding a diffusion model of stable
vector fields (with Lyapunov channel) toward a system's reachable fields."""

from .diffusion import Checkpoint, Denoiser, DenoiserConfig, NoiseSchedule, cosine_alphabar, train_denoiser
from .dynamics import BENCHMARKS, REPORTED_CONTROLLERS, ControllerParams, ControlSystem, get_system
from .errors import MGLCError
from .grid import GridField, GridSpec, NormCodec, make_grid
from .guidance import synthesize, synthesize_best
from .lyapunov_data import Dataset, build_dataset
from .verify import RolloutConfig, rollout_batch

__version__ = "0.1.0"
