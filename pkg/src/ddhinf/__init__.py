"""Data-driven constrained H-infinity state feedback from noisy trajectories."""

from .datagen import ConsistencyForm, DataSet, NoiseModel, consistency_form, excite, noise_model_pointwise
from .estimators import DataDrivenHinfController, MovingHorizonHinfController
from .mhc import init, mhc_step, run_moving_horizon
from .plant import PlantModel, TrajectoryLog, example44, hinf_norm, simulate
from .synth import Controller, SynthesisSpec, certify, synthesize

__version__ = "0.1.0"

__all__ = [
    "ConsistencyForm",
    "Controller",
    "DataDrivenHinfController",
    "DataSet",
    "MovingHorizonHinfController",
    "NoiseModel",
    "PlantModel",
    "SynthesisSpec",
    "TrajectoryLog",
    "certify",
    "consistency_form",
    "example44",
    "excite",
    "hinf_norm",
    "init",
    "mhc_step",
    "noise_model_pointwise",
    "run_moving_horizon",
    "simulate",
    "synthesize",
]
