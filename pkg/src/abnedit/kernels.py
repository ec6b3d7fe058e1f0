"""Backend selection for the convolution kernels.

Two implementations exist: a compiled direct-convolution extension and a
numpy im2col+GEMM fallback. Neither dominates: the compiled stencils win
3x3 stride-1 shapes at every batch size and small or wide-row workloads
(where GEMM setup overhead dominates), while BLAS wins bulk strided shapes
whose inner spans are short. ``auto`` therefore dispatches per call:

* batch 1 (interactive inference) -> compiled
* 3x3 stride-1 pad-1 same-size stencils -> compiled
* few taps per output element (C*KH*KW <= 16) -> compiled
* wide rows (>= 32 columns) at moderate total size -> compiled
* everything else -> numpy

``ABNEDIT_KERNELS=numpy|cython`` forces a single backend (forcing
``cython`` raises if the extension is missing, so CI can assert the build
happened). The thresholds come from benchmarks/bench_kernels.py.
"""

import os

from . import _numpykernels

_requested = os.environ.get("ABNEDIT_KERNELS", "auto").lower()

if _requested not in ("auto", "numpy", "cython"):
    raise RuntimeError(f"ABNEDIT_KERNELS must be auto|numpy|cython, got {_requested!r}")

_compiled = None
if _requested in ("auto", "cython"):
    try:
        from . import _convkernels as _compiled
    except ImportError:
        if _requested == "cython":
            raise
        _compiled = None

_MAX_TAPS = 16
_WIDE_ROW = 32
_WIDE_MACS = 16 * 2**20


def _pick(n, c, h, w, f, kh, kw, stride, pad, ho, wo, same_size):
    if n == 1:
        # latency mode: per-call GEMM setup dominates at batch 1
        return _compiled
    if kh == 3 and kw == 3 and stride == 1 and pad == 1 and same_size:
        return _compiled
    taps = c * kh * kw
    if taps <= _MAX_TAPS:
        return _compiled
    if wo >= _WIDE_ROW and n * f * ho * wo * taps <= _WIDE_MACS:
        return _compiled
    return _numpykernels


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _auto_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(wd, kw, stride, pad)
    impl = _pick(n, c, h, wd, f, kh, kw, stride, pad, ho, wo,
                 ho == h and wo == wd)
    return impl.conv2d_forward(x, w, stride, pad)


def _auto_backward_input(gy, w, h, wd, stride, pad):
    n, f, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    impl = _pick(n, c, h, wd, f, kh, kw, stride, pad, ho, wo,
                 ho == h and wo == wd)
    return impl.conv2d_backward_input(gy, w, h, wd, stride, pad)


def _auto_backward_weight(gy, x, kh, kw, stride, pad):
    n, f, ho, wo = gy.shape
    _, c, h, wd = x.shape
    impl = _pick(n, c, h, wd, f, kh, kw, stride, pad, ho, wo,
                 ho == h and wo == wd)
    return impl.conv2d_backward_weight(gy, x, kh, kw, stride, pad)


if _compiled is None:
    BACKEND = "numpy"
    conv2d_forward = _numpykernels.conv2d_forward
    conv2d_backward_input = _numpykernels.conv2d_backward_input
    conv2d_backward_weight = _numpykernels.conv2d_backward_weight
elif _requested == "cython":
    BACKEND = "cython"
    conv2d_forward = _compiled.conv2d_forward
    conv2d_backward_input = _compiled.conv2d_backward_input
    conv2d_backward_weight = _compiled.conv2d_backward_weight
else:
    BACKEND = "auto"
    conv2d_forward = _auto_forward
    conv2d_backward_input = _auto_backward_input
    conv2d_backward_weight = _auto_backward_weight


def get_backend():
    """Active kernel policy: "auto" (per-call choice), "cython", or "numpy"."""
    return BACKEND
