"""Kernel backend selection.

The hot inner loops (CSR mat-mat products for the Clenshaw recurrence,
modified Gram-Schmidt QR, and the sequential memory replay) have a compiled
Cython implementation and a pure NumPy/SciPy fallback.  The compiled core is
used when importable; set SPECSTREAM_PURE_PYTHON=1 to force the fallback.
``BACKEND`` records which one is active.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("SPECSTREAM_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build environment
        _impl = _pykernels
        BACKEND = "python"

csr_matmat = _impl.csr_matmat
mgs_qr_core = _impl.mgs_qr_core
memory_replay = _impl.memory_replay

__all__ = ["BACKEND", "csr_matmat", "mgs_qr_core", "memory_replay", "_pykernels"]
