"""Gaussian-mixture checkpoint/restart for particle-in-cell simulations.

Per-cell velocity distributions are compressed into adaptively sized
Gaussian mixtures, written to compact binary checkpoints and rebuilt at
restart with exact charge, momentum and energy.
"""
from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .codec import CellRecord, compress_cell, decompress_cell, lemons_correct
from .em import FitConfig, FitReport, WeightedSampleSet, fit_adaptive
from .gauss import enforce_gauss
from .mixture import GaussianComponent, GaussianMixture, sample_mixture
from .particles import Particles
from .pic import SimConfig, checkpoint_now, init_two_stream, restart_from, step_implicit

__version__ = "0.1.0"

__all__ = [
    "CellRecord", "Checkpoint", "FitConfig", "FitReport", "GaussianComponent",
    "GaussianMixture", "Particles", "SimConfig", "WeightedSampleSet", "checkpoint_now",
    "compress_cell", "decompress_cell", "enforce_gauss", "fit_adaptive", "init_two_stream",
    "lemons_correct", "read_checkpoint", "restart_from", "sample_mixture", "step_implicit",
    "write_checkpoint",
]
