"""Hot numeric kernels: compiled core with a NumPy fallback.

The Cython extension is preferred when importable. Set MODWEAVE_PURE_PY=1
to force the NumPy path (useful for parity debugging and as the documented
fallback on installs without a C compiler). `BACKEND` reports which one is
active. benchmarks/bench_kernels.py compares the two.
"""

import os

from . import _ref

if os.environ.get("MODWEAVE_PURE_PY", "") not in ("", "0"):
    _impl = _ref
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _ref

BACKEND = _impl.BACKEND
GELU_C0 = _ref.GELU_C0
GELU_C1 = _ref.GELU_C1

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
adam_update = _impl.adam_update
sgd_momentum_update = _impl.sgd_momentum_update
fps = _impl.fps
