import os
import sys

# Single-threaded BLAS before numpy loads anywhere: the determinism criteria
# compare metrics bitwise across reruns.
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))
