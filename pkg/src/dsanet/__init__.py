"""Dual-stream attention network for hyperspectral unmixing.

A spatial window branch and a multiview spectral branch estimate
per-pixel abundances, a cross-fusion attention stage combines them, and
a nonnegative linear decoder reconstructs the spectrum; the decoder
columns are the endmember estimates. Built on a small taped float64
autodiff core with numba-accelerated kernels (numpy fallback via the
DSANET_BACKEND environment variable).
"""

from . import hsidata, kernels, model, specview, tensorcore, unmixeval
from .errors import DSANetError

__version__ = "0.1.0"

__all__ = [
    "DSANetError",
    "hsidata",
    "kernels",
    "model",
    "specview",
    "tensorcore",
    "unmixeval",
    "__version__",
]
