"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``GSCART_BACKEND=python``
to force the numpy fallback.
"""

import os
from types import ModuleType

from . import _pykernels


def _load_compiled():
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


_compiled = _load_compiled()


def get_backend(name: str) -> ModuleType:
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built (run `pip install -e .`)")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    return ["python"] if _compiled is None else ["cython", "python"]


if os.environ.get("GSCART_BACKEND", "").lower() == "python" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

_active = get_backend(BACKEND)
mills_shift = _active.mills_shift
idw_fill = _active.idw_fill
kmeans_assign = _active.kmeans_assign
