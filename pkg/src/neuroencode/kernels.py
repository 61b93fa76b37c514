"""Kernel backend selection.

The compiled extension ``_ckernels`` is used when it imports; otherwise (or
when ``NEUROENCODE_PURE_PYTHON=1``) the numpy versions in ``_pykernels``.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("NEUROENCODE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _pykernels

gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward


def use_backend(name: str):
    """Swap the active backend at runtime (benchmarks and tests)."""
    global BACKEND, _impl, gelu_forward, gelu_backward, layer_norm_forward, layer_norm_backward
    global softmax_forward, softmax_backward
    if name == "cython":
        from . import _ckernels as mod
    elif name == "python":
        mod = _pykernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND, _impl = name, mod
    gelu_forward = mod.gelu_forward
    gelu_backward = mod.gelu_backward
    layer_norm_forward = mod.layer_norm_forward
    layer_norm_backward = mod.layer_norm_backward
    softmax_forward = mod.softmax_forward
    softmax_backward = mod.softmax_backward
