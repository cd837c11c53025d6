"""Two-modality image fusion with selective state-space mixing, on a small numpy autograd core."""
import os

_threads = os.environ.get("FMAMBA_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
