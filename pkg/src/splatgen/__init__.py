"""Gaussian-splat human generation by dual-branch score distillation."""

import os as _os

if "NUMBA_THREADING_LAYER" not in _os.environ:
    import numba as _numba

    # the bundled TBB is too old for numba; prefer OpenMP quietly
    _numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__version__ = "0.1.0"
