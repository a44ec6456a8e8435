"""Backend selection for the compiled kernels.

Set ``LATTICE_MPC_DISABLE_NUMBA=1`` before importing the package to force the
pure numpy path. The choice is made once, at import time.
"""

import os

ENV_FLAG = "LATTICE_MPC_DISABLE_NUMBA"

_disabled = os.environ.get(ENV_FLAG, "").strip().lower() in ("1", "true", "yes", "on")

numba = None
if not _disabled:
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba = None

HAVE_NUMBA = numba is not None
BACKEND = "numba" if HAVE_NUMBA else "numpy"


def njit(fn):
    """Compile ``fn`` with numba when available, otherwise return it untouched."""
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)
