"""Backend selection for the flow-solver kernels.

The compiled Cython module is preferred when importable; the numpy fallback
implements the identical contract. ``MEXFLOW_KERNELS`` forces a choice:
"c" (fail if the extension is missing), "py", or "auto" (default).
"""

import os

from mexflow._kernels import _py

_choice = os.environ.get("MEXFLOW_KERNELS", "auto")

if _choice == "py":
    _impl = _py
elif _choice in ("auto", "c"):
    try:
        from mexflow._kernels import _native as _impl
    except ImportError:
        if _choice == "c":
            raise ImportError(
                "MEXFLOW_KERNELS=c but the compiled kernels are not built; "
                "run `python setup.py build_ext --inplace`"
            )
        _impl = _py
else:
    raise ValueError(f"MEXFLOW_KERNELS must be 'auto', 'c' or 'py', got {_choice!r}")

BACKEND_NAME = _impl.BACKEND_NAME

warp_bilinear = _impl.warp_bilinear
hs_solve = _impl.hs_solve
hs_energy = _py.hs_energy
lk_flow = _impl.lk_flow
tvl1_level = _impl.tvl1_level


def backends():
    """All importable backend modules, keyed by name (for tests/benchmarks)."""
    found = {"python": _py}
    try:
        from mexflow._kernels import _native

        found[_native.BACKEND_NAME] = _native
    except ImportError:
        pass
    return found
