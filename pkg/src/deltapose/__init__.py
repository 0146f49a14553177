"""deltapose: desk-scale 6D object pose tracking on SE(3).

Synthetic RGB-D training-pair generation with physics-plausible domain
randomization, a dual-encoder residual network predicting se(3) twists,
a Gauss-Newton depth-ICP baseline, and an ADD/ADD-S AUC evaluation harness.
"""

from .se3 import Pose, Twist, UnitQuaternion, exp, log, compose, inverse, transform_points

__all__ = [
    "Pose",
    "Twist",
    "UnitQuaternion",
    "exp",
    "log",
    "compose",
    "inverse",
    "transform_points",
]

__version__ = "0.1.0"
