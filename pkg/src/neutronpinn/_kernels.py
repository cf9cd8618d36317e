"""Fused elementwise kernels for the tanh Taylor channels.

numba is used when importable; otherwise the numpy reference path in
:mod:`neutronpinn.autodiff` runs.  ``fastmath`` stays off so results are
reproducible run to run.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _tanh_rest(u, z, d, order, hdims):
        # u, z: (C, M) views with the value channel already holding tanh
        M = u.shape[1]
        nh = hdims.shape[0] if order == 2 else 0
        for k in range(d):
            for m in range(M):
                t = z[0, m]
                z[1 + k, m] = (1.0 - t * t) * u[1 + k, m]
        for j in range(nh):
            g = 1 + hdims[j]
            h = 1 + d + j
            for m in range(M):
                t = z[0, m]
                s = 1.0 - t * t
                gv = u[g, m]
                z[h, m] = s * u[h, m] + (-2.0 * t * s) * gv * gv

    def tanh_channels(u, d, order, hdims):
        z = np.empty_like(u)
        # numpy's vectorised tanh is several times faster than the scalar libm call
        np.tanh(u[0], out=z[0])
        if order >= 1:
            C = u.shape[0]
            _tanh_rest(u.reshape(C, -1), z.reshape(C, -1), d, order, hdims)
        return z

    @numba.njit(cache=True)
    def _vjp(z, u, zb, ub, d, order, hdims):
        M = u.shape[1]
        nh = hdims.shape[0] if order == 2 else 0
        for m in range(M):
            t = z[0, m]
            ub[0, m] = (1.0 - t * t) * zb[0, m]
        if order == 0:
            return
        for k in range(d):
            for m in range(M):
                t = z[0, m]
                s = 1.0 - t * t
                ub[1 + k, m] = s * zb[1 + k, m]
                ub[0, m] += (-2.0 * t * s) * (zb[1 + k, m] * u[1 + k, m])
        for j in range(nh):
            g = 1 + hdims[j]
            h = 1 + d + j
            for m in range(M):
                t = z[0, m]
                s = 1.0 - t * t
                s2 = -2.0 * t * s
                s3 = -2.0 * s * s + 4.0 * t * t * s
                zh = zb[h, m]
                uk = u[g, m]
                ub[h, m] = s * zh
                ub[g, m] += 2.0 * s2 * uk * zh
                ub[0, m] += zh * (s2 * u[h, m] + s3 * uk * uk)

    def tanh_channels_vjp(z, u, zb, d, order, hdims):
        C = u.shape[0]
        ub = np.empty_like(zb)
        _vjp(z.reshape(C, -1), u.reshape(C, -1), np.ascontiguousarray(zb).reshape(C, -1),
             ub.reshape(C, -1), d, order, hdims)
        return ub

    @numba.njit(cache=True)
    def rb_sweep(phi, src, diag, cw, ce, cs, cn, occ, omega):
        """One red then one black relaxation pass in place; returns max |update|."""
        nx, ny = phi.shape
        delta = 0.0
        for color in range(2):
            for i in range(nx):
                for j in range((i + color) % 2, ny, 2):
                    if not occ[i, j]:
                        continue
                    acc = src[i, j]
                    if i > 0:
                        acc += cw[i, j] * phi[i - 1, j]
                    if i < nx - 1:
                        acc += ce[i, j] * phi[i + 1, j]
                    if j > 0:
                        acc += cs[i, j] * phi[i, j - 1]
                    if j < ny - 1:
                        acc += cn[i, j] * phi[i, j + 1]
                    step = omega * (acc / diag[i, j] - phi[i, j])
                    phi[i, j] += step
                    if abs(step) > delta:
                        delta = abs(step)
        return delta

else:  # pragma: no cover
    tanh_channels = None
    tanh_channels_vjp = None
    rb_sweep = None


def tune_allocator(threshold: int = 1 << 30) -> bool:
    """Keep large numpy buffers on the glibc heap instead of fresh mmaps.

    Every Taylor-channel stack is a few MB; with the default mmap threshold
    each one is page-faulted in anew, which roughly doubles the cost of a
    forward pass.  Process-global, so only entry points call it.  Returns
    False where glibc's ``mallopt`` is unavailable.
    """
    import ctypes
    import ctypes.util

    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    M_TRIM_THRESHOLD, M_MMAP_THRESHOLD = -1, -3
    ok = mallopt(M_MMAP_THRESHOLD, ctypes.c_int(threshold)) == 1
    ok &= mallopt(M_TRIM_THRESHOLD, ctypes.c_int(threshold)) == 1
    return bool(ok)
