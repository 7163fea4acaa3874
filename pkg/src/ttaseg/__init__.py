"""Model-agnostic quality estimation for volumetric binary segmentation.

Test-time-augmentation (TTA) ensembles score each unlabeled case with an
estimated Dice computed against the ensemble's median vote; the scores rank
cases for active-learning annotation (worst first) and gate self-training
pseudo-labels (auto threshold), with optional border-slice correction.
A synthetic phantom generator and a trainable toy segmenter make the three
study designs runnable on a desk in minutes.
"""

from .exceptions import GeometryError, PauseRequested, ValidationError
from .volcore import (
    Mask,
    MetricResult,
    ProbMap,
    Volume,
    assd2d,
    binarize,
    compute_metrics,
    dice,
    hausdorff95,
    load_svol,
    save_svol,
    surface_voxels,
)

__version__ = "0.1.0"
