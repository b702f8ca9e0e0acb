"""Microstructure parameter maps from sparsely sampled diffusion MRI.

Modules
-------
volume_io  NIfTI-1 volumes, gradient tables, parameter map sets
phantom    forward models and synthetic phantoms
sampling   electrostatic subsampling of shells
dti        weighted least-squares tensor fitting
noddi      dictionary-based NODDI fitting
tissue     HMRF tissue probability maps from T1w
estimator  patch-based network estimator
metrics    PSNR / SSIM evaluation
pipeline   config-driven stages with manifests
"""

__version__ = "0.1.0"
