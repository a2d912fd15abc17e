"""Privacy-preserving optical masks: a differentiable amplitude-mask front-end
trained jointly with digital classifiers, plus the attacks that measure what
the mask still leaks."""
from .attacks import AttackReport, train_post_adversary, train_reconstructor
from .data import AttributePair, DatasetSplit, synthesize_toy
from .evaluation import EvalReport, content_reduction
from .optics import (OpticalKernel, SensorGeometry, ShapeError, export_mask, init_kernel,
                     optical_forward, optical_forward_reference, project_physical)
from .training import GapConfig, IsConfig, TrainConfig, train_baseline, train_gap, train_is

__version__ = "0.1.0"
