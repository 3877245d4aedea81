"""Pick the compiled kernels when available, the numpy twins otherwise.

Set ``CSPRL_PURE_PYTHON=1`` to force the numpy path.
"""
from __future__ import annotations

import os

from . import _kernels_py

kernels = _kernels_py

if os.environ.get("CSPRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        kernels = _compiled

BACKEND = kernels.BACKEND
