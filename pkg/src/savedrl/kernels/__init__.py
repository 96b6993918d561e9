"""Inner-loop kernels with a compiled implementation and a numpy fallback.

The compiled extension ``_ckernels`` is used when it was built at install
time; otherwise the numpy versions in ``_pykernels`` are used. Setting the
environment variable ``SAVEDRL_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
if os.environ.get("SAVEDRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

radius_any = _impl.radius_any
count_violations = _impl.count_violations

__all__ = ["BACKEND", "radius_any", "count_violations"]
