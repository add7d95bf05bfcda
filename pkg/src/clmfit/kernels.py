"""Z-normalized sliding-window correlation: compiled core with a numpy fallback.

The contrast-normalizing correlation layer is the hot spot of response-map
computation (hundreds of kernels against every window of every ROI, for every
landmark, on every fitting stage), so it exists twice:

* ``clmfit._zncc`` -- a Cython extension used when it was built;
* :func:`znorm_correlate_numpy` -- a vectorized numpy implementation.

The backend is picked once at import time; set ``CLMFIT_PURE_PYTHON=1`` to
force the numpy fallback. ``benchmarks/bench_kernels.py`` times the two
against each other.
"""

import os

import numpy as np

try:
    from clmfit import _zncc
except ImportError:
    _zncc = None

HAVE_EXT = _zncc is not None
_force_pure = os.environ.get("CLMFIT_PURE_PYTHON", "0").lower() not in ("", "0", "false")
BACKEND = "cython" if HAVE_EXT and not _force_pure else "numpy"

ZNORM_EPS = 1e-8


def znorm_windows(patch, ksize, eps=ZNORM_EPS):
    """Return every ksize x ksize window of ``patch``, Z-score normalized.

    Each window has its mean subtracted and is divided by its population
    standard deviation; windows whose deviation falls below ``eps`` count as
    zero-variance and map to the zero vector. Output shape is
    (n_windows, ksize*ksize) with windows in row-major scan order.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2:
        raise ValueError("patch must be a 2-D array")
    if patch.shape[0] < ksize or patch.shape[1] < ksize:
        raise ValueError(f"patch {patch.shape} is smaller than the {ksize}x{ksize} kernel")
    win = np.lib.stride_tricks.sliding_window_view(patch, (ksize, ksize))
    flat = win.reshape(-1, ksize * ksize)
    mu = flat.mean(axis=1, keepdims=True)
    sd = flat.std(axis=1, keepdims=True)
    normed = (flat - mu) / np.maximum(sd, eps)
    normed[(sd < eps).ravel()] = 0.0
    return normed


def znorm_correlate_numpy(roi, kernels, biases, eps=ZNORM_EPS):
    """Correlate the Z-score-normalized windows of ``roi`` with each kernel.

    ``kernels`` has shape (n_kernels, k, k); the result has shape
    (n_kernels, H-k+1, W-k+1).
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    nk, kh, kw = kernels.shape
    if kh != kw:
        raise ValueError("kernels must be square")
    if biases.shape != (nk,):
        raise ValueError("bias count does not match kernel count")
    roi = np.asarray(roi, dtype=np.float64)
    oh = roi.shape[0] - kh + 1
    ow = roi.shape[1] - kw + 1
    normed = znorm_windows(roi, kh, eps)
    out = normed @ kernels.reshape(nk, -1).T + biases
    return np.ascontiguousarray(out.T.reshape(nk, oh, ow))


def znorm_correlate(roi, kernels, biases, eps=ZNORM_EPS):
    """Dispatch to the compiled core when built, else the numpy fallback."""
    if BACKEND == "cython":
        return _zncc.znorm_correlate(
            np.ascontiguousarray(roi, dtype=np.float64),
            np.ascontiguousarray(kernels, dtype=np.float64),
            np.ascontiguousarray(biases, dtype=np.float64),
            eps,
        )
    return znorm_correlate_numpy(roi, kernels, biases, eps)
