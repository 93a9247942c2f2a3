"""Joint human-contact / object-affordance estimation on procedural egocentric scenarios."""

import os as _os

# Pin BLAS to one thread before numpy loads: reductions keep a fixed order,
# which the byte-reproducibility contract of every CLI command relies on.
for _var in (
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "OMP_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from . import autodiff, geometry  # noqa: E402,F401
