"""Kernel backend selection.

The conv/pool/crop inner loops dominate CPU training time, so they are
implemented twice: a Cython extension (``_native``) and a pure-numpy
fallback (``_numpy``). The extension is preferred when it imported cleanly;
set ``INSULOC_KERNELS=numpy`` or ``native`` to force a choice.
``benchmarks/bench_kernels.py`` compares the two.
"""

import os

from . import _numpy

_choice = os.environ.get("INSULOC_KERNELS", "auto").lower()

if _choice not in ("auto", "native", "numpy"):
    raise ValueError(f"INSULOC_KERNELS must be auto, native or numpy, got {_choice!r}")

kernels = None
if _choice in ("auto", "native"):
    try:
        from . import _native as kernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "native":
            raise
if kernels is None:
    kernels = _numpy

BACKEND_NAME = "native" if kernels is not _numpy else "numpy"


def backend_name() -> str:
    """Name of the kernel implementation in use ('native' or 'numpy')."""
    return BACKEND_NAME
