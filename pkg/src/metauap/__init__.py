"""Few-shot universal adversarial perturbations with meta-learned fine-tuners.

The package trains a coordinate-wise LSTM optimizer that generates a single
perturbation attacking many images at once, works across image sources of
different shapes, and compares it against gradient-descent, PGD and
initialization-based meta-learning baselines.
"""

import os

# Episode-level parallelism only; keep BLAS single-threaded so results are
# bit-reproducible at any worker count. Must run before numpy is imported.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
