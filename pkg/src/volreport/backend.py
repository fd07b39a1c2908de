"""Kernel backend selection: numba-jitted loops with a pure-numpy fallback.

The env flag VOLREPORT_NUMBA picks the path:
  - "1"/"true"  require numba (ImportError if missing)
  - "0"/"false" force the numpy fallback even when numba is installed
  - unset/other use numba when importable, numpy otherwise
"""

import os

ENV_VAR = "VOLREPORT_NUMBA"

try:
    import numba  # noqa: F401

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

_flag = os.environ.get(ENV_VAR, "auto").strip().lower()
if _flag in ("1", "true", "on", "yes"):
    if not NUMBA_AVAILABLE:
        raise ImportError(f"{ENV_VAR}={_flag} but numba is not importable")
    USE_NUMBA = True
elif _flag in ("0", "false", "off", "no"):
    USE_NUMBA = False
else:
    USE_NUMBA = NUMBA_AVAILABLE


def njit(*args, **kwargs):
    """numba.njit passthrough; only call when NUMBA_AVAILABLE."""
    from numba import njit as _njit

    return _njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
