"""Obstacle-distance inference from 2D laser scans.

A 1D fully convolutional autoencoder (built from scratch on numpy, with
hand-written backward passes) maps raw laser range scans to robot-to-obstacle
distances, recovering obstacles the scanner cannot see at its own height
(glass panels, tabletops).  The package also ships a 2.5D scene simulator
that synthesizes paired training data, a trainer with an ablation harness,
and a CLI tying everything together.
"""

from .data import Dataset, ScanPair, fuse, normalize, denormalize
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    HaluError,
    ShapeError,
    TrainingDiverged,
)
from .model import Autoencoder, AutoencoderConfig, build, load, save
from .optim import AdamState, adam_init, adam_step, mse, rmsle
from .simulator import LaserSpec, Obstacle, Scene, generate_dataset, generate_scene
from .training import TrainConfig, evaluate, run_ablation, train

__version__ = "0.1.0"
