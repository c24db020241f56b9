"""Backend selection for the hot loops.

The compiled extension is used when it imports; set ``EAGLE_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("EAGLE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

jacobi_sweeps = _impl.jacobi_sweeps
patch_coverage = _impl.patch_coverage


def backends():
    """Return ``{name: module}`` for every backend importable here."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        return found
    found["cython"] = _compiled
    return found
