"""Pick the compiled kernels when importable, else the numpy reference.

Set ``SCOREDISTILL_PURE=1`` to force the pure-Python path.
"""

import os

from . import _reference

if os.environ.get("SCOREDISTILL_PURE", "") not in ("", "0"):
    _ext = None
else:
    try:
        from . import _ext
    except ImportError:  # extension not built
        _ext = None

HAVE_EXT = _ext is not None
NAME = "compiled" if HAVE_EXT else "python"

splat_render = _ext.splat_render if HAVE_EXT else _reference.splat_render
splat_vjp = _ext.splat_vjp if HAVE_EXT else _reference.splat_vjp
direct_trajectory = _ext.direct_trajectory if HAVE_EXT else None
