"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
``LTOOD_PURE_PYTHON`` environment variable is set to a non-empty value, the
numpy fallback is used. Callers look up ``kernels`` at call time, so
:func:`use` switches backends for the whole package.
"""
import os

from . import _fallback

try:
    from . import _kernels as compiled
except ImportError:  # extension not built
    compiled = None

kernels = _fallback if (compiled is None or os.environ.get("LTOOD_PURE_PYTHON")) else compiled


def available():
    names = ["python"]
    if compiled is not None:
        names.append("cython")
    return names


def get(name):
    if name == "python":
        return _fallback
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return compiled
    raise ValueError(f"unknown backend {name!r}")


def use(name):
    global kernels
    kernels = get(name)
    return kernels


def current():
    return kernels.NAME
