"""Encode-process-decode operator learning with modulated SIRENs."""

__version__ = "0.1.0"

import os as _os

# must run before numpy loads its BLAS
_threads = _os.environ.get("CORAL_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
