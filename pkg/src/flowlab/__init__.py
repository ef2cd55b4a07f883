"""flowlab: self-distilled unsupervised optical flow at desk scale.

Subpackages split along the pipeline: :mod:`flowlab.core` (types, warping,
flow/image formats, metrics), :mod:`flowlab.measures` (census photometric
loss, edge-aware smoothness, occlusion checks), :mod:`flowlab.confidence`
(residual calibration and reliable masks), :mod:`flowlab.augment`
(spatial+photometric augmentation of image/flow/mask tuples),
:mod:`flowlab.models` (teacher and student networks, checkpoints),
:mod:`flowlab.synth` (synthetic scene generator and dataset access),
:mod:`flowlab.train` (three-stage trainer and pseudo-label store) and
:mod:`flowlab.cli`.
"""

__version__ = "0.1.0"
