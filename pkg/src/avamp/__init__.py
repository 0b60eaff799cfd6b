"""Adaptive VAMP: solver, state evolution and experiment harness."""

from .denoiser import AutoTune, EmClosedForm, FiniteGrid, Oracle
from .model import BgParams, InvalidConfig, ProblemInstance, SvdOperator, synthesize_instance
from .state_evolution import SeConfig, se_config_for_mode, se_run
from .vamp import MODES, VampConfig, VampFailure, VampInit, mode_config, run

__version__ = "0.1.0"
