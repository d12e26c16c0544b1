"""Kernel backend selection.

The compiled extension is used when it imports; ``BIOAGE_BACKEND=python``
forces the numpy fallback.
"""

import os

if os.environ.get("BIOAGE_BACKEND", "").lower() == "python":
    from . import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_py as kernels

        BACKEND = "python"

__all__ = ["BACKEND", "kernels"]
