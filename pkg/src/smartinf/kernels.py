"""Kernel backend selection.

The compiled extension is used when importable; ``SMARTINF_KERNELS=numpy``
forces the numpy fallback (useful for benchmarks and for cross-checking the
two backends against each other).
"""
import os

from . import _fallback

fallback = _fallback

if os.environ.get("SMARTINF_KERNELS", "").lower() == "numpy":
    compiled = None
else:
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

backend = compiled if compiled is not None else _fallback

axpby = backend.axpby
adam_step = backend.adam_step
sgd_momentum_step = backend.sgd_momentum_step
adagrad_step = backend.adagrad_step
sumsq_unscaled = backend.sumsq_unscaled
scatter_chunks = backend.scatter_chunks
IMPLEMENTATION = backend.IMPLEMENTATION


def available_backends():
    """Map of backend name to module for every backend present."""
    found = {"numpy": _fallback}
    if compiled is not None:
        found["compiled"] = compiled
    return found
