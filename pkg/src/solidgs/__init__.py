"""Sparse-view surface reconstruction with solid Gaussian splatting."""

import os

# prefer OpenMP: numba probes TBB first and warns when the installed TBB is too old
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

__version__ = "0.1.0"
