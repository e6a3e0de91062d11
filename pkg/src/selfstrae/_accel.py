"""Backend switch for the compiled tree kernels.

Set ``SELFSTRAE_NUMBA=0`` to force the pure-numpy path. The flag is read once
at import time; numba missing from the environment has the same effect.
"""
import os

_FLAG = os.environ.get("SELFSTRAE_NUMBA", "1").strip().lower()

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("0", "false", "no", "off")
