"""Kernel backend selection.

The hot gather/scatter kernels behind conv2d exist twice: a Cython
extension (built by setup.py) and a pure-numpy fallback.  The compiled
version is picked at import time when present; set POLYFORGE_KERNELS=fallback
to force the numpy path (used by the benchmark and for debugging).
"""

import os

_forced = os.environ.get("POLYFORGE_KERNELS", "").strip().lower()

if _forced in ("fallback", "python", "numpy"):
    from . import _fallback as impl
else:
    try:
        from . import _native as impl  # type: ignore[no-redef]
    except ImportError:
        from . import _fallback as impl  # type: ignore[no-redef]

im2col = impl.im2col
col2im = impl.col2im
IS_NATIVE = impl.IS_NATIVE


def backend_name() -> str:
    return "native" if IS_NATIVE else "fallback"
