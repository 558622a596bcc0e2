"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; setting the environment
variable ``QOPE_KERNELS=python`` forces the fallback.  ``BACKEND`` names the
active implementation and :func:`get_backend` returns either module by name.
"""
from __future__ import annotations

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None

_choice = os.environ.get("QOPE_KERNELS", "").strip().lower()
if _choice == "python" or _ckernels is None:
    _active = _pykernels
else:
    _active = _ckernels

BACKEND = _active.NAME
mdn_nll_grad = _active.mdn_nll_grad
mdn_train = _active.mdn_train
build_tree = _active.build_tree
predict_forest = _active.predict_forest


def available_backends():
    names = ["python"]
    if _ckernels is not None:
        names.insert(0, "cython")
    return names


def get_backend(name=None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return _active
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
