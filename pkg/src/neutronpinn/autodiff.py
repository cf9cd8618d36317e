"""Exact input and parameter derivatives for :class:`~neutronpinn.network.Network`.

Input derivatives are propagated forward as truncated Taylor channels: for
every hidden unit we carry its value, its first derivative along each input
axis and (for the requested axes) its pure second derivative.  A hand-written
reverse sweep over those channels then yields the gradient of any loss that is
a function of the output channels with respect to all weights and biases.

Channel layout of the stacked arrays ``V`` of shape ``(C, N, width)``::

    0                 value
    1 .. d            d/dx_k            (order >= 1)
    1+d .. 1+d+h-1    d^2/dx_k^2 for k in hess_dims   (order == 2)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .network import Network

# set to False to force the pure-numpy channel arithmetic
USE_KERNELS = _kernels.HAVE_NUMBA


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class DerivativeBundle:
    """Value, input gradient and diagonal input Hessian at ``N`` points.

    Second-derivative columns that were not requested are NaN so that any
    accidental use is loud.
    """

    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def __len__(self):
        return self.value.shape[0]

    def scaled(self, alpha: float) -> "DerivativeBundle":
        return DerivativeBundle(alpha * self.value, alpha * self.grad, alpha * self.hess)

    @classmethod
    def zeros(cls, n: int, d: int) -> "DerivativeBundle":
        return cls(np.zeros(n), np.zeros((n, d)), np.zeros((n, d)))

    def take(self, idx) -> "DerivativeBundle":
        return DerivativeBundle(self.value[idx], self.grad[idx], self.hess[idx])


@dataclass
class Tape:
    net: Network
    order: int
    hess_dims: tuple[int, ...]
    V: list[np.ndarray]  # V[l] = channel stack of layer l output (V[0] = scaled input)
    U: list[np.ndarray]  # pre-activation channel stacks, U[l] for l = 1..L (U[0] unused)


def _input_stack(net: Network, X: np.ndarray, order: int, hess_dims) -> np.ndarray:
    xh = net.scale_inputs(X)
    n, d = xh.shape
    C = 1 + (d if order >= 1 else 0) + (len(hess_dims) if order >= 2 else 0)
    V0 = np.zeros((C, n, d))
    V0[0] = xh
    if order >= 1:
        for k in range(d):
            V0[1 + k, :, k] = net.in_scale[k]
    return V0


def taylor_forward(net: Network, X, order: int = 2, hess_dims=None):
    """Propagate value/gradient/diagonal-Hessian channels through ``net``.

    Returns ``(bundle, tape)``; the tape feeds :func:`taylor_backward`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = net.config.input_dim
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    hess_dims = tuple(range(d)) if hess_dims is None else tuple(hess_dims)
    if order < 2:
        hess_dims = ()
    V = [_input_stack(net, X, order, hess_dims)]
    U = [None]
    L = net.depth
    g0 = 1
    h0 = 1 + d
    for l in range(1, L + 1):
        W, b = net.weights[l - 1], net.biases[l - 1]
        u = V[l - 1] @ W.T
        u[0] += b
        src = net.config.skip_source(l)
        if src is not None:
            u += V[src]
        U.append(u)
        if l == L:
            V.append(u)
            break
        if USE_KERNELS:
            z = _kernels.tanh_channels(u, d, order, np.asarray(hess_dims, dtype=np.int64))
        else:
            z = _tanh_channels(u, order, hess_dims, d)
        V.append(z)

    out = V[-1][:, :, 0]
    n = X.shape[0]
    grad = out[g0 : g0 + d].T.copy() if order >= 1 else np.full((n, d), np.nan)
    hess = np.full((n, d), np.nan)
    for j, k in enumerate(hess_dims):
        hess[:, k] = out[h0 + j]
    bundle = DerivativeBundle(out[0].copy(), grad, hess)
    return bundle, Tape(net, order, hess_dims, V, U)


def taylor_backward(tape: Tape, cot: DerivativeBundle) -> np.ndarray:
    """Vector-Jacobian product: flat parameter gradient of ``sum(cot * bundle)``.

    ``cot`` holds dLoss/d(value), dLoss/d(grad) and dLoss/d(hess); columns of
    ``cot.hess`` outside the tape's ``hess_dims`` are ignored.
    """
    net = tape.net
    d = net.config.input_dim
    L = net.depth
    order, hess_dims = tape.order, tape.hess_dims
    C = tape.V[0].shape[0]
    n = tape.V[0].shape[1]
    g0, h0 = 1, 1 + d
    hdims = np.asarray(hess_dims, dtype=np.int64)

    obar = np.zeros((C, n, 1))
    obar[0, :, 0] = cot.value
    if order >= 1:
        obar[g0 : g0 + d, :, 0] = cot.grad.T
    for j, k in enumerate(hess_dims):
        obar[h0 + j, :, 0] = cot.hess[:, k]

    zbar = [None] * (L + 1)
    grads_W = [None] * L
    grads_b = [None] * L
    ubar = obar
    for l in range(L, 0, -1):
        if l < L:
            if USE_KERNELS:
                ubar = _kernels.tanh_channels_vjp(tape.V[l], tape.U[l], zbar[l], d, order, hdims)
            else:
                ubar = _tanh_vjp(tape.V[l], tape.U[l], zbar[l], order, hess_dims, d)
        W = net.weights[l - 1]
        vprev = tape.V[l - 1]
        grads_W[l - 1] = ubar.reshape(-1, ubar.shape[-1]).T @ vprev.reshape(-1, vprev.shape[-1])
        grads_b[l - 1] = ubar[0].sum(axis=0)
        if l > 1:
            contrib = ubar @ W
            zbar[l - 1] = contrib if zbar[l - 1] is None else zbar[l - 1] + contrib
        src = net.config.skip_source(l)
        if src is not None:
            zbar[src] = ubar.copy() if zbar[src] is None else zbar[src] + ubar

    parts = []
    for gW, gb in zip(grads_W, grads_b):
        parts.append(gW.ravel())
        parts.append(gb)
    return np.concatenate(parts)


def _tanh_channels(u, order, hess_dims, d):
    g0, h0 = 1, 1 + d
    z = np.empty_like(u)
    z[0] = np.tanh(u[0])
    if order >= 1:
        s = 1.0 - z[0] ** 2
        z[g0 : g0 + d] = s * u[g0 : g0 + d]
        if order == 2 and hess_dims:
            s2 = -2.0 * z[0] * s
            for j, k in enumerate(hess_dims):
                z[h0 + j] = s * u[h0 + j] + s2 * u[g0 + k] ** 2
    return z


def _tanh_vjp(z, u, zb, order, hess_dims, d):
    g0, h0 = 1, 1 + d
    t = z[0]
    s = 1.0 - t * t
    ub = np.empty_like(zb)
    ub[0] = s * zb[0]
    if order == 0:
        return ub
    s2 = -2.0 * t * s
    ug = u[g0 : g0 + d]
    zg_b = zb[g0 : g0 + d]
    ub[g0 : g0 + d] = s * zg_b
    ub[0] += s2 * np.einsum("knw,knw->nw", zg_b, ug)
    if order == 2 and hess_dims:
        s3 = -2.0 * s * s + 4.0 * t * t * s
        for j, k in enumerate(hess_dims):
            zh_b = zb[h0 + j]
            uk = u[g0 + k]
            ub[h0 + j] = s * zh_b
            ub[g0 + k] += 2.0 * s2 * uk * zh_b
            ub[0] += zh_b * (s2 * u[h0 + j] + s3 * uk * uk)
    return ub


def eval_with_input_derivs(net: Network, points) -> DerivativeBundle:
    """Value, gradient and full diagonal Hessian (all input axes) at ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != net.config.input_dim:
        raise ValueError(
            f"point dimension {pts.shape[1]} does not match network input {net.config.input_dim}"
        )
    bundle, _ = taylor_forward(net, pts, order=2)
    return bundle


def loss_param_gradient(net: Network, loss_fn):
    """Gradient of a scalar functional of the network w.r.t. its flat parameters.

    ``loss_fn(net)`` must return ``(loss, grad)`` when it is differentiable
    through this engine, or a plain float for parameter-independent losses
    (whose gradient is zero).  Non-finite values raise :class:`DivergenceError`.
    """
    res = loss_fn(net)
    if isinstance(res, tuple):
        loss, grad = res
    else:
        loss, grad = float(res), np.zeros(net.n_params)
    if not np.isfinite(loss):
        raise DivergenceError(f"loss is not finite: {loss}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (net.n_params,) or not np.all(np.isfinite(grad)):
        raise DivergenceError("parameter gradient is not finite")
    return loss, grad


def half_squared_norm(net: Network):
    """``0.5 * ||theta||^2`` and its gradient; a handy analytic check."""
    theta = net.get_flat()
    return 0.5 * float(theta @ theta), theta.copy()
