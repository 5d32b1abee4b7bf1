"""Backend selection for the grid mirror-descent kernels.

The compiled ``_kernels`` extension is used when it is importable; set
``MANIFOLD_EXPLORE_PURE_PYTHON=1`` to force the NumPy fallback.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("MANIFOLD_EXPLORE_PURE_PYTHON"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

normalize_dual = backend.normalize_dual
md_dual_run = backend.md_dual_run
mirror_flow_euler = backend.mirror_flow_euler
