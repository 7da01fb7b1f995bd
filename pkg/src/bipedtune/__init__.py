"""Autotuning of a single-rigid-body MPC for bipedal walking through a
differentiable closed-loop rollout, optionally augmented by a learned model of
the gap between commanded and realised ground reaction wrenches."""

from .closed_loop import SimSetup, run_closed_loop
from .config import ExperimentConfig
from .difftune import DiffTuner, TuneConfig, tune
from .grfm_net import GRFMNet
from .mpc import MpcConfig, MpcController, MpcTheta
from .plant import ActuatorDistortion
from .srbm import RobotParams

__version__ = "0.1.0"

__all__ = ["ActuatorDistortion", "DiffTuner", "ExperimentConfig", "GRFMNet", "MpcConfig",
           "MpcController", "MpcTheta", "RobotParams", "SimSetup", "TuneConfig",
           "run_closed_loop", "tune"]
