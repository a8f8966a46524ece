"""Backend selection for the encoder's elementwise kernels.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. Set ``SPACKLE_KERNELS=python`` before import to force the
fallback (used by the benchmark and the backend-agreement tests).
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SPACKLE_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "python" or None for active)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
masked_softmax_forward = _impl.masked_softmax_forward
softmax_backward = _impl.softmax_backward
