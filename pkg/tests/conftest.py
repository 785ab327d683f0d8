"""Shared test configuration.

BLAS thread pools are pinned to one thread before numpy's first import so
timed runs measure single-core behavior and floating-point results do not
depend on the host's core count.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
