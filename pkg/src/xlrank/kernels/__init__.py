"""Hot row-wise kernels with a compiled core and a numpy fallback.

The compiled Cython extension (``xlrank.kernels._fast``) is preferred; the
numpy implementation is selected when the extension is unavailable or when
``XLRANK_PURE_PY=1`` is set.  Both backends expose the same functions over
C-contiguous float64 arrays and agree to ~1e-15 relative (summation order
differs, so equality is not bit-exact across backends; a single backend is
deterministic).
"""

import os

if os.environ.get("XLRANK_PURE_PY"):
    from . import numpy_ops as impl

    BACKEND = "numpy"
else:
    try:
        from . import _fast as impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        from . import numpy_ops as impl

        BACKEND = "numpy"

softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
layer_norm_fwd = impl.layer_norm_fwd
layer_norm_bwd = impl.layer_norm_bwd
cross_entropy_fwd = impl.cross_entropy_fwd
cross_entropy_bwd = impl.cross_entropy_bwd
