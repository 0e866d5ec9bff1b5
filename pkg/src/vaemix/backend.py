"""Kernel backend selection.

Imports the compiled extension when present, falling back to the pure-Python
reference kernels.  Set ``VAEMIX_PURE_KERNELS=1`` to force the fallback (used
by the parity tests and the benchmark).  Both backends expose identical
functions and produce bit-identical float64 results.
"""

import os

if os.environ.get("VAEMIX_PURE_KERNELS", "") not in ("", "0"):
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as kernels

BACKEND_NAME: str = kernels.BACKEND_NAME


def get_backend():
    """Return the active kernel module (compiled or pure)."""
    return kernels
