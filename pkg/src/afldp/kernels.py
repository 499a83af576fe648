"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``AFLDP_PURE_PYTHON=1``) the numpy implementations are used.  Both expose
the same functions.  Index arrays passed to the batch kernels must be
``int64`` and all float arrays C-contiguous ``float64``.
"""

import os

from . import _pykernels

_force_python = os.environ.get("AFLDP_PURE_PYTHON", "") not in ("", "0")

if _force_python:
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = _impl.BACKEND
logistic_batch_grad = _impl.logistic_batch_grad
hinge_batch_grad = _impl.hinge_batch_grad
quadratic_batch_grad = _impl.quadratic_batch_grad
clip_and_perturb = _impl.clip_and_perturb
sgd_step = _impl.sgd_step


def backends():
    """Return every importable backend module, keyed by name."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
