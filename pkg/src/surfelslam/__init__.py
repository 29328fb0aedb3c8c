"""RGB-D SLAM on 2D Gaussian surfels with a differentiable CPU rasterizer."""

import os

# numba's TBB layer needs a newer TBB than many distros ship; OpenMP is fine
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
