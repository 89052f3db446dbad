"""Patch-based priors for imaging inverse problems.

Gaussian-mixture (EPLL), normalizing-flow (patchNR), adversarial (ALR) and
optimal-transport patch priors, the forward models they are paired with,
MAP and Langevin solvers, and image-quality metrics.
"""

import os as _os

# numpy is single-process here; the only workers are BLAS threads, which read
# these variables once, when numpy is first loaded
if _os.environ.get("PATCHPRIOR_THREADS", "").isdigit() and int(_os.environ["PATCHPRIOR_THREADS"]) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["PATCHPRIOR_THREADS"])

from .errors import (  # noqa: E402
    FormatError,
    InvalidArgumentError,
    NumericalError,
    PatchPriorError,
    StateError,
    UnsupportedOpError,
)
from .imagecore import DiscreteMeasure, PatchConfig, PatchSet, extract_patches, patch_measure, scatter_patch_gradients

__version__ = "0.1.0"

__all__ = [
    "DiscreteMeasure",
    "FormatError",
    "InvalidArgumentError",
    "NumericalError",
    "PatchConfig",
    "PatchPriorError",
    "PatchSet",
    "StateError",
    "UnsupportedOpError",
    "extract_patches",
    "patch_measure",
    "scatter_patch_gradients",
]
