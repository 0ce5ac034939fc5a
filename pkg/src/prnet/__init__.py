"""PRNet: wavelet-convolution encoder/decoder segmentation network.

The package is self-contained: tensors, reverse-mode autodiff, convolution,
wavelet transforms, the PRNet model, losses, data handling, and training all
live here, with numpy as the only numeric dependency.
"""

import os as _os

# Honour PRNET_THREADS before numpy is imported anywhere in this process;
# BLAS reads these variables only once, at load time.
_threads = _os.environ.get("PRNET_THREADS")
if _threads and _threads.isdigit():
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)
del _os, _threads

__version__ = "0.1.0"

from .tensor import Tensor, GradTape, no_grad, use_dtype  # noqa: E402
from .model import PRNet, PRNetConfig  # noqa: E402

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "use_dtype",
    "PRNet",
    "PRNetConfig",
    "__version__",
]
