"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable. Set
``LORADROP_KERNELS=numpy`` or ``LORADROP_KERNELS=cython`` to force a
backend; forcing ``cython`` raises if the extension is missing.
"""

import os

_requested = os.environ.get("LORADROP_KERNELS", "auto").lower()

if _requested not in ("auto", "numpy", "cython"):
    raise ValueError(f"LORADROP_KERNELS must be auto|numpy|cython, got {_requested!r}")

if _requested == "numpy":
    from . import _numpy_impl as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        from . import _numpy_impl as _impl

        BACKEND = "numpy"

softmax_rows = _impl.softmax_rows
softmax_rows_grad = _impl.softmax_rows_grad
gelu = _impl.gelu
gelu_grad = _impl.gelu_grad
layernorm = _impl.layernorm
layernorm_grad = _impl.layernorm_grad


def backend() -> str:
    """Name of the kernel backend selected at import ("cython" or "numpy")."""
    return BACKEND
