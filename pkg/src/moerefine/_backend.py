"""Kernel backend selection, resolved once at import time.

``MOEREFINE_KERNELS=python`` forces the NumPy kernels, ``=c`` requires the
compiled extension (ImportError if it was not built), and the default
``auto`` prefers the extension with a silent fallback.
"""

import os

from . import _kernels_py

_choice = os.environ.get("MOEREFINE_KERNELS", "auto").lower()
if _choice not in ("auto", "c", "python"):
    raise ValueError(f"MOEREFINE_KERNELS must be auto, c or python, got {_choice!r}")

kernels = _kernels_py
if _choice in ("auto", "c"):
    try:
        from . import _kernels_c

        kernels = _kernels_c
    except ImportError:
        if _choice == "c":
            raise


def backend_name() -> str:
    return "python" if kernels is _kernels_py else "c"
