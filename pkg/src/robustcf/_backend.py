"""Select the kernel implementation at import time."""

import os

from . import _fallback

BACKEND = "python"
predict_margin_batch = _fallback.predict_margin_batch

if os.environ.get("ROBUSTCF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from ._kernels import predict_margin_batch  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
