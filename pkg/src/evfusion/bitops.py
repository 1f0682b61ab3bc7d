"""Kernel backend selection.

The compiled ``_bitops`` extension is used when importable; otherwise the
numpy implementation in ``_bitops_py`` takes over. Setting
``EVFUSION_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _bitops_py

_FORCE_PY = os.environ.get("EVFUSION_PURE_PYTHON", "") not in ("", "0")

try:
    if _FORCE_PY:
        raise ImportError("pure-python backend requested")
    from . import _bitops as _compiled
except ImportError:
    _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _bitops_py

binary_conv2d_words = _impl.binary_conv2d_words
binary_linear_words = _impl.binary_linear_words
sign_pack_conv = _impl.sign_pack_conv


def available_backends() -> dict:
    """Name -> kernel module for every backend that can run here."""
    out = {"python": _bitops_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
