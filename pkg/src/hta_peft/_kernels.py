"""Select the compiled kernels when the extension is built, else the numpy twins.

Set ``HTA_PEFT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _core_py

BACKEND = "python"
jacobi_sweeps = _core_py.jacobi_sweeps
gelu_backward = _core_py.gelu_backward

if not os.environ.get("HTA_PEFT_PURE_PYTHON"):
    try:
        from ._core import gelu_backward, jacobi_sweeps  # type: ignore[no-redef]  # noqa: F401

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass
