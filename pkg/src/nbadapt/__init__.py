"""Self-learning for attention encoder-decoder sequence models.

Adapts a seed model to unlabeled data using its own beam-search N-best
hypotheses as confidence-weighted training targets, through a single output
path or multi-task branches, plus a deterministic federated-averaging
simulation of the same recipe.
"""

import os as _os

# Metrics must reproduce bitwise across reruns; keep BLAS single-threaded
# unless the environment explicitly says otherwise. Must happen before numpy
# initializes its thread pools, hence here.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
